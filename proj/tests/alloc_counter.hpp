// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>

// Heap accounting for the test binaries that link alloc_counter.cpp: global
// operator new/delete record live and peak bytes while a scope is active.
namespace alloc_counter {

void reset_peak();
size_t live_bytes();
size_t peak_bytes();

// Peak bytes above the live level at construction.
class Scope {
 public:
  Scope();
  size_t peak_growth() const;

 private:
  size_t base_;
};

}  // namespace alloc_counter
