#pragma once

// Global-allocation counter for steady-state checks on timed loops.
//
// The counter itself is an inline atomic, always available. The operator
// new/delete replacements that feed it are global and must live in exactly
// one translation unit per binary, so they are expanded by the macro below
// rather than defined here; a binary that never expands the macro simply
// keeps the counter at zero.

#include <atomic>
#include <cstdint>
#include <cstdlib>
#include <new>

namespace kla::alloc {

inline std::atomic<std::uint64_t>& counter() {
  static std::atomic<std::uint64_t> n{0};
  return n;
}

inline std::uint64_t count() { return counter().load(std::memory_order_relaxed); }

}  // namespace kla::alloc

// Expand once in the translation unit that owns the binary's allocator.
#define KLA_DEFINE_ALLOC_COUNTER                                              \
  void* operator new(std::size_t size) {                                      \
    kla::alloc::counter().fetch_add(1, std::memory_order_relaxed);            \
    if (void* p = std::malloc(size ? size : 1)) return p;                     \
    throw std::bad_alloc();                                                   \
  }                                                                           \
  void* operator new[](std::size_t size) {                                    \
    kla::alloc::counter().fetch_add(1, std::memory_order_relaxed);            \
    if (void* p = std::malloc(size ? size : 1)) return p;                     \
    throw std::bad_alloc();                                                   \
  }                                                                           \
  void operator delete(void* p) noexcept { std::free(p); }                    \
  void operator delete[](void* p) noexcept { std::free(p); }                  \
  void operator delete(void* p, std::size_t) noexcept { std::free(p); }       \
  void operator delete[](void* p, std::size_t) noexcept { std::free(p); }
