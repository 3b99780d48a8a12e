// Copyright (C) 2026 The TARA authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "tara/numerics/matrix.hpp"

namespace tara::io {

/// Binary weights container shared by adapter, base-model and probe files.
///
/// Layout (all integers little-endian):
///   [0,4)   magic, 4 ASCII bytes
///   [4,8)   u32 version
///   [8,12)  u32 header length H
///   [12,12+H) UTF-8 JSON header; its "blocks" array lists {name, rows, cols} in file order
///   then each block as rows*cols IEEE-754 f64 values, row-major.
struct Container {
    std::uint32_t version = 1;
    nlohmann::json header = nlohmann::json::object();
    std::vector<std::pair<std::string, num::Matrix>> blocks;
};

std::vector<std::uint8_t> encode_container(std::string_view magic, const Container& c);

/// Throws FormatError carrying the failing byte offset on bad magic, unsupported
/// version, malformed header, truncation or trailing bytes.
Container decode_container(std::span<const std::uint8_t> bytes, std::string_view magic,
                           std::uint32_t supported_version);

void write_file(const std::string& path, std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> read_file(const std::string& path);

void write_text(const std::string& path, std::string_view text);
std::string read_text(const std::string& path);

/// Hex form of a 64-bit digest, for manifests.
std::string hex64(std::uint64_t v);
/// FNV-1a over raw bytes.
std::uint64_t fnv1a(std::span<const std::uint8_t> bytes);

}  // namespace tara::io
