#include "higfa/allocator.hpp"

#include <cstdlib>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace higfa {

void configure_allocator() noexcept {
#if defined(__GLIBC__)
  // glibc caps the mmap threshold at 32 MiB on 64-bit targets.
  mallopt(M_MMAP_THRESHOLD, 32 * 1024 * 1024);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 256 * 1024 * 1024);
#endif
}

}  // namespace higfa
