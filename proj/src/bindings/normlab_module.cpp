#include <pybind11/pybind11.h>

PYBIND11_MODULE(_normlab, m) { m.doc() = "normlab core bindings"; }
