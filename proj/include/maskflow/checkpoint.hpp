#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "maskflow/params.hpp"

// Binary weight container.
//
//   header   "PLM2" | u32 version | u64 config hash | i32 stage tag | u32 count
//   table    count x { u32 name length | name | u32 dtype | u32 group |
//                      u32 rank | u64 dims[rank] | u64 offset | u64 length }
//   payload  raw little-endian tensor data, in table order
//
// Offsets are absolute file positions. Entries are written in name order, so
// save(load(save(x))) reproduces the same bytes.
namespace maskflow::ckpt {

inline constexpr std::uint32_t kVersion = 1;
inline constexpr std::uint32_t kDtypeF64 = 1;

struct Checkpoint {
    ParamStore params;
    std::uint64_t config_hash = 0;
    int stage = 0;
};

struct TableEntry {
    std::string name;
    std::uint32_t dtype = kDtypeF64;
    Group group = Group::other;
    Shape shape;
    std::uint64_t offset = 0;
    std::uint64_t length = 0;
};

std::vector<std::uint8_t> serialize(const Checkpoint& c);
// Throws FormatError on bad magic, version, dtype, overlapping or
// out-of-range entries.
Checkpoint deserialize(const std::vector<std::uint8_t>& bytes);
std::vector<TableEntry> read_table(const std::vector<std::uint8_t>& bytes);

// Throw IoError when the file cannot be written or read.
void save(const std::string& path, const Checkpoint& c);
Checkpoint load(const std::string& path);

std::vector<std::uint8_t> read_file(const std::string& path);
void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes);
void write_text(const std::string& path, const std::string& text);
std::string read_text(const std::string& path);

}  // namespace maskflow::ckpt
