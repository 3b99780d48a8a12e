// Copyright (C) 2026 The TARA authors
// SPDX-License-Identifier: Apache-2.0

#include "tara/io/container.hpp"

#include <bit>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <sstream>

#include "tara/error.hpp"

namespace tara::io {

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) {
        out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
        out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
}

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

    std::size_t offset() const { return pos_; }
    std::size_t remaining() const { return bytes_.size() - pos_; }

    void need(std::size_t n, const char* what) const {
        if (remaining() < n) {
            throw FormatError(std::string("truncated file: expected ") + std::to_string(n) + " bytes of " + what +
                                  ", " + std::to_string(remaining()) + " left",
                              pos_);
        }
    }

    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) {
            v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
        }
        pos_ += 4;
        return v;
    }

    double f64() {
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) {
            v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
        }
        pos_ += 8;
        return std::bit_cast<double>(v);
    }

    std::string_view text(std::size_t n, const char* what) {
        need(n, what);
        std::string_view s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
        pos_ += n;
        return s;
    }

private:
    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_container(std::string_view magic, const Container& c) {
    if (magic.size() != 4) {
        throw ConfigError("container magic must be 4 bytes");
    }
    nlohmann::json header = c.header;
    nlohmann::json blocks = nlohmann::json::array();
    for (const auto& [name, m] : c.blocks) {
        blocks.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}});
    }
    header["blocks"] = std::move(blocks);
    const std::string text = header.dump();

    std::vector<std::uint8_t> out(magic.begin(), magic.end());
    put_u32(out, c.version);
    put_u32(out, static_cast<std::uint32_t>(text.size()));
    out.insert(out.end(), text.begin(), text.end());
    for (const auto& block : c.blocks) {
        for (double v : block.second.data()) {
            put_u64(out, std::bit_cast<std::uint64_t>(v));
        }
    }
    return out;
}

Container decode_container(std::span<const std::uint8_t> bytes, std::string_view magic,
                           std::uint32_t supported_version) {
    Reader in(bytes);
    const std::string_view got = in.text(4, "magic");
    for (std::size_t i = 0; i < 4; ++i) {
        if (got[i] != magic[i]) {
            throw FormatError("bad magic, expected '" + std::string(magic) + "'", i);
        }
    }
    Container c;
    const std::size_t version_at = in.offset();
    c.version = in.u32("version");
    if (c.version != supported_version) {
        throw FormatError("unsupported version " + std::to_string(c.version), version_at);
    }
    const std::uint32_t header_len = in.u32("header length");
    const std::size_t header_at = in.offset();
    const std::string_view text = in.text(header_len, "header");
    std::vector<std::pair<std::string, std::size_t>> shapes;
    std::vector<std::pair<std::size_t, std::size_t>> dims;
    try {
        c.header = nlohmann::json::parse(text);
        for (const auto& b : c.header.at("blocks")) {
            shapes.emplace_back(b.at("name").get<std::string>(), 0);
            dims.emplace_back(b.at("rows").get<std::size_t>(), b.at("cols").get<std::size_t>());
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed header: ") + e.what(), header_at);
    }
    c.header.erase("blocks");
    for (std::size_t b = 0; b < shapes.size(); ++b) {
        const auto [rows, cols] = dims[b];
        if (cols != 0 && rows > (in.remaining() / 8) / cols) {
            throw FormatError("truncated block '" + shapes[b].first + "'", in.offset());
        }
        in.need(rows * cols * 8, "block data");
        std::vector<double> data(rows * cols);
        for (double& v : data) {
            v = in.f64();
        }
        try {
            c.blocks.emplace_back(shapes[b].first, num::Matrix(rows, cols, std::move(data)));
        } catch (const Error& e) {
            throw FormatError(std::string("block '") + shapes[b].first + "': " + e.what(), in.offset());
        }
    }
    if (in.remaining() != 0) {
        throw FormatError(std::to_string(in.remaining()) + " trailing bytes", in.offset());
    }
    return c;
}

void write_file(const std::string& path, std::span<const std::uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw ConfigError("cannot open " + path + " for writing");
    }
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw ConfigError("short write to " + path);
    }
}

std::vector<std::uint8_t> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw ConfigError("cannot open " + path + " for reading");
    }
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_text(const std::string& path, std::string_view text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw ConfigError("cannot open " + path + " for writing");
    }
    out << text;
}

std::string read_text(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw ConfigError("cannot open " + path + " for reading");
    }
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::uint64_t fnv1a(std::span<const std::uint8_t> bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (std::uint8_t b : bytes) {
        h ^= b;
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace tara::io
