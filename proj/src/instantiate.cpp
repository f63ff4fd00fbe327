#include "mstg/ops.hpp"
