#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "storm/binio.hpp"
#include "storm/model.hpp"

// STRMCKPT checkpoint layout, all integers little-endian:
//
//   "STRMCKPT"            8 bytes magic
//   version               u16 (= 1)
//   config                u32 byte length + canonical JSON text
//   tensor count          u32
//   per tensor:           u32 name length, name bytes,
//                         u32 rank, u32 dims[rank],
//                         u8 dtype (0 = f32, 1 = f64),
//                         row-major payload
namespace storm::model {

enum class DType : std::uint8_t { F32 = 0, F64 = 1 };

inline constexpr std::uint16_t kCheckpointVersion = 1;

std::vector<std::uint8_t> encode_checkpoint(const Model& model, DType dtype = DType::F32);
Model decode_checkpoint(const std::vector<std::uint8_t>& bytes, const std::string& source = "checkpoint");

void save_checkpoint(const std::filesystem::path& path, const Model& model, DType dtype = DType::F32);
Model load_checkpoint(const std::filesystem::path& path);

// Tensor records without the header; shared with the pooled-target cache.
void write_tensor_record(io::Writer& w, const std::string& name, const Tensor& t, DType dtype);
std::pair<std::string, Tensor> read_tensor_record(io::Reader& r);

}  // namespace storm::model
