// Heap blocks are handed out 64-byte aligned. Eigen peels reductions over
// mapped std::vector storage up to the first packet-aligned element, so with
// malloc's 16-byte guarantee and AVX packets the summation order (and the
// last bits of every gradient) would depend on where a buffer landed. With a
// fixed alignment, runs with the same seed are bit-identical.
#include <cstdlib>
#include <new>

namespace {
constexpr std::size_t kAlign = 64;

void* aligned_or_throw(std::size_t n) {
  const std::size_t size = n == 0 ? kAlign : (n + kAlign - 1) / kAlign * kAlign;
  void* p = std::aligned_alloc(kAlign, size);
  if (p == nullptr) throw std::bad_alloc();
  return p;
}
}  // namespace

void* operator new(std::size_t n) { return aligned_or_throw(n); }
void* operator new[](std::size_t n) { return aligned_or_throw(n); }
void* operator new(std::size_t n, const std::nothrow_t&) noexcept {
  try {
    return aligned_or_throw(n);
  } catch (...) {
    return nullptr;
  }
}
void* operator new[](std::size_t n, const std::nothrow_t&) noexcept {
  try {
    return aligned_or_throw(n);
  } catch (...) {
    return nullptr;
  }
}
void operator delete(void* p) noexcept { std::free(p); }
void operator delete[](void* p) noexcept { std::free(p); }
void operator delete(void* p, std::size_t) noexcept { std::free(p); }
void operator delete[](void* p, std::size_t) noexcept { std::free(p); }
