#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "prinv/tensor.hpp"

namespace prinv {

// On-disk layout, all integers little-endian:
//
//   "PRINV1"                          6-byte magic / version tag
//   u32 config_len, config bytes      key = value text
//   u32 tensor_count
//   per tensor:
//     u16 name_len, name bytes
//     u8  dtype                       1 = float32
//     u8  ndim, u64 dims[ndim]
//     u64 offset                      from start of payload
//     u64 nbytes
//   payload                           raw float32 values, manifest order
struct Checkpoint {
  std::string config_text;
  std::vector<std::pair<std::string, Tensor>> tensors;
};

inline constexpr char kCheckpointMagic[] = "PRINV1";

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

}  // namespace prinv
