#pragma once

namespace higfa {

/// Keep freed tensor buffers in the heap instead of returning them to the
/// kernel on every release. Call once at program start; no-op off glibc.
void configure_allocator() noexcept;

}  // namespace higfa
