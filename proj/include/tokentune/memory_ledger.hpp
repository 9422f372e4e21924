// SPDX-FileCopyrightText: Copyright (c) 2026 The tokentune authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstddef>
#include <memory>

#include "tokentune/matrix.hpp"

namespace tokentune {

/// Running tally of the bytes the engine currently holds in tensors it
/// allocated, with a high-water mark. Not synchronized: one ledger per
/// thread of execution.
class MemoryLedger {
 public:
  void acquire(std::size_t bytes) {
    live_ += bytes;
    peak_ = std::max(peak_, live_);
  }

  void release(std::size_t bytes) { live_ -= std::min(bytes, live_); }

  std::size_t live_bytes() const noexcept { return live_; }
  std::size_t peak_bytes() const noexcept { return peak_; }
  void reset_peak() noexcept { peak_ = live_; }

 private:
  std::size_t live_ = 0;
  std::size_t peak_ = 0;
};

template <RealScalar Real>
using Tensor = std::shared_ptr<const Matrix<Real>>;

/// Wraps a freshly computed matrix so that its bytes stay on the ledger for
/// exactly as long as some handle or cache refers to it.
template <RealScalar Real>
Tensor<Real> make_tracked(const std::shared_ptr<MemoryLedger>& ledger, Matrix<Real>&& value) {
  const std::size_t bytes = byte_count(value);
  ledger->acquire(bytes);
  return Tensor<Real>(new Matrix<Real>(std::move(value)), [ledger, bytes](const Matrix<Real>* m) {
    ledger->release(bytes);
    delete m;
  });
}

/// Non-owning view of storage that lives elsewhere (model parameters).
template <RealScalar Real>
Tensor<Real> make_borrowed(const Matrix<Real>& value) {
  return Tensor<Real>(&value, [](const Matrix<Real>*) {});
}

}  // namespace tokentune
