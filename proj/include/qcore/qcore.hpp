#ifndef QCORE_QCORE_HPP
#define QCORE_QCORE_HPP

#include "qcore/bitflip.hpp"
#include "qcore/calibration.hpp"
#include "qcore/common.hpp"
#include "qcore/coreset.hpp"
#include "qcore/dataset.hpp"
#include "qcore/harness.hpp"
#include "qcore/miss_tracker.hpp"
#include "qcore/nn.hpp"
#include "qcore/quantizer.hpp"

#endif  // QCORE_QCORE_HPP
