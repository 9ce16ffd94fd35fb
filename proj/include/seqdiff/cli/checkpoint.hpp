#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "seqdiff/core/tensor.hpp"

namespace seqdiff {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
    std::string name;
    Matrix<float> value;
};

/// "SDCK" container: u32 version, u32 config length + UTF-8 JSON config,
/// u32 tensor count, then per tensor u16 name length, name, u8 dtype (0 = f32),
/// u8 rank, u64 dims, little-endian row-major payload; trailing CRC32.
struct Checkpoint {
    std::string config_json;
    std::vector<NamedTensor> tensors;

    const NamedTensor* find(const std::string& name) const;
};

std::string serialize_checkpoint(const Checkpoint& ckpt);
/// Throws CorruptFileError on bad magic, CRC or structure and VersionError on
/// an unknown version or dtype. Nothing is returned unless the whole buffer
/// parses.
Checkpoint parse_checkpoint(const std::string& bytes);

/// Writes to a sibling temporary file and renames it over `path`.
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

std::uint32_t crc32_of(const std::string& bytes);

}  // namespace seqdiff
