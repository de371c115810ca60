/*
 * Copyright 2026 The microdet Authors. All Rights Reserved.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#ifndef MICRODET_CHECKPOINT_HPP
#define MICRODET_CHECKPOINT_HPP

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "microdet/tensor.hpp"

namespace microdet {

using NamedTensors = std::vector<std::pair<std::string, Tensorf>>;

// "MDT1" | u32 count | { u32 name_len | name | u32 rank | u32 dims[rank] | f32 data }*
// All integers and floats little-endian.
void save_tensors(const std::filesystem::path& path, const NamedTensors& tensors);
NamedTensors load_tensors(const std::filesystem::path& path);

void write_tensors(std::ostream& os, const NamedTensors& tensors);
NamedTensors read_tensors(std::istream& is);

}  // namespace microdet

#endif  // MICRODET_CHECKPOINT_HPP
