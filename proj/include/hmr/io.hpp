#pragma once

#include "hmr/tensor.hpp"

#include <string>
#include <utility>

namespace hmr {

/// Tensor blob format: u64 little-endian header length, a JSON header
/// {"shape":[...],"name":"..."}, then the payload as little-endian f64,
/// row-major.
void write_tensor_blob(const std::string& path, const std::string& name, const Tensor& t);
std::pair<std::string, Tensor> read_tensor_blob(const std::string& path);

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& content);

}  // namespace hmr
