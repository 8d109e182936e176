#include "prunability/parallel.hpp"

#include <omp.h>

namespace prunability {

int max_threads() { return omp_get_max_threads(); }

void set_threads(int n) { omp_set_num_threads(n < 1 ? 1 : n); }

bool openmp_enabled() {
#ifdef _OPENMP
  return true;
#else
  return false;
#endif
}

}  // namespace prunability
