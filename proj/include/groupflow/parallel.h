/*
 * Copyright 2026 The groupflow Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#ifndef GROUPFLOW_PARALLEL_H_
#define GROUPFLOW_PARALLEL_H_

#include <cstddef>
#include <exception>
#include <thread>
#include <vector>

namespace groupflow {

// Calls fn(i) for i in [0, n) on up to `jobs` threads. Work is split by
// index, so results written to slot i do not depend on the thread count.
// The first exception (lowest thread) is rethrown after all threads join.
template <typename F>
void ParallelFor(std::size_t n, std::size_t jobs, F&& fn) {
  if (jobs <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  const std::size_t workers = jobs < n ? jobs : n;
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> threads;
  for (std::size_t w = 0; w < workers; ++w) {
    threads.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : threads) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace groupflow

#endif  // GROUPFLOW_PARALLEL_H_
