#include <qcore/qcore.hpp>
int main() { return 0; }
