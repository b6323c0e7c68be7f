#pragma once

// Flat binary container of named float32 arrays.
//
//   "EXPX"  u8 version  u32 record_count
//   per record: u32 name_len, name bytes, u32 ndim, u32 dims[ndim],
//               float32 values[prod(dims)]
//
// All integers and floats are little-endian.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "expx/nn.hpp"
#include "expx/tensor.hpp"

namespace expx {

inline constexpr char kCheckpointMagic[4] = {'E', 'X', 'P', 'X'};
inline constexpr std::uint8_t kCheckpointVersion = 1;

struct Record {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

std::vector<std::uint8_t> encode_records(const std::vector<Record>& records);
std::vector<Record> decode_records(std::span<const std::uint8_t> bytes);

void write_records(const std::filesystem::path& path, const std::vector<Record>& records);
std::vector<Record> read_records(const std::filesystem::path& path);

// Section prefix of a record name ("caee" for "caee.fuse.fc1.weight").
std::string record_section(const std::string& name);

const Record* find_record(const std::vector<Record>& records, const std::string& name);

template <typename T>
void append_params(std::vector<Record>& out, const std::string& prefix, const ParamSet<T>& params);

// Every parameter must be present under prefix with a matching shape.
template <typename T>
void load_params(const std::vector<Record>& records, const std::string& prefix, ParamSet<T>& params);

Record scalar_record(std::string name, double value);
double scalar_value(const std::vector<Record>& records, const std::string& name);

}  // namespace expx
