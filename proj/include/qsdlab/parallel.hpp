#pragma once

#include <cstdlib>
#include <string>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace qsdlab {

// Every parallel kernel in the library also has a serial reference path,
// selected here. Kernels write per-index into preallocated buffers and reduce
// serially in index order afterwards, so both policies produce bit-identical
// results at any thread count.
enum class ExecPolicy { Serial, OpenMP };

inline int resolve_threads(int requested) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("QSDLAB_THREADS")) {
    const int v = std::atoi(env);
    if (v > 0) return v;
  }
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

template <class F>
void for_range(ExecPolicy pol, int threads, long n, F&& body) {
  if (pol == ExecPolicy::OpenMP) {
    const int nt = resolve_threads(threads);
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(nt)
#endif
    for (long i = 0; i < n; ++i) body(i);
  } else {
    for (long i = 0; i < n; ++i) body(i);
  }
}

}  // namespace qsdlab
