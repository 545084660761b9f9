#pragma once
// Serve per-batch megabyte temporaries from the heap rather than fresh mmaps.

#if __has_include(<malloc.h>)
#include <malloc.h>
#endif

namespace synthloop::detail {

inline const bool kHeapTuned = [] {
#if defined(M_MMAP_THRESHOLD) && defined(M_TRIM_THRESHOLD)
    mallopt(M_MMAP_THRESHOLD, 256 << 20);
    mallopt(M_TRIM_THRESHOLD, 512 << 20);
    return true;
#else
    return false;
#endif
}();

}  // namespace synthloop::detail
