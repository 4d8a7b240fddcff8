// Copyright (c) 2026, The fgsn authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cstddef>
#include <functional>

namespace fgsn {

/// Worker count: FGSN_THREADS when set to a positive integer, else hardware concurrency.
unsigned thread_budget();

/// Calls fn(i) for i in [0, n) on up to thread_budget() threads. Each index is
/// visited exactly once; callers write results into pre-sized slots. The first
/// exception thrown by any worker is rethrown on the calling thread.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace fgsn
