#include "storm/checkpoint.hpp"

#include <cstring>

namespace storm::model {

namespace {
constexpr char kMagic[8] = {'S', 'T', 'R', 'M', 'C', 'K', 'P', 'T'};
}

void write_tensor_record(io::Writer& w, const std::string& name, const Tensor& t, DType dtype) {
  w.str(name);
  w.u32(static_cast<std::uint32_t>(t.rank()));
  for (std::size_t dim : t.shape()) w.u32(static_cast<std::uint32_t>(dim));
  w.u8(static_cast<std::uint8_t>(dtype));
  for (double v : t.values()) {
    if (dtype == DType::F32)
      w.f32(static_cast<float>(v));
    else
      w.f64(v);
  }
}

std::pair<std::string, Tensor> read_tensor_record(io::Reader& r) {
  std::string name = r.str();
  const std::uint32_t rank = r.u32();
  if (rank > 8) fail(ErrorKind::File, "tensor " + name + " has implausible rank " + std::to_string(rank));
  num::Shape shape;
  std::size_t count = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    shape.push_back(r.u32());
    count *= shape.back();
  }
  const auto dtype = r.u8();
  if (dtype > 1) fail(ErrorKind::File, "tensor " + name + " has unknown dtype tag " + std::to_string(dtype));
  std::vector<double> data(count);
  for (double& v : data) v = dtype == 0 ? static_cast<double>(r.f32()) : r.f64();
  return {std::move(name), Tensor(std::move(shape), std::move(data))};
}

std::vector<std::uint8_t> encode_checkpoint(const Model& model, DType dtype) {
  io::Writer w;
  w.bytes(kMagic, sizeof kMagic);
  w.u16(kCheckpointVersion);
  w.str(to_json(model.config()));
  const auto& p = model.params();
  w.u32(static_cast<std::uint32_t>(p.size()));
  for (std::size_t i = 0; i < p.size(); ++i) write_tensor_record(w, p.name(i), p.value(i), dtype);
  return w.buffer();
}

Model decode_checkpoint(const std::vector<std::uint8_t>& bytes, const std::string& source) {
  io::Reader r(bytes, source);
  char magic[8];
  r.bytes(magic, sizeof magic);
  if (std::memcmp(magic, kMagic, sizeof magic) != 0) fail(ErrorKind::File, source + ": not a STRMCKPT file");
  const auto version = r.u16();
  if (version != kCheckpointVersion)
    fail(ErrorKind::File, source + ": unsupported checkpoint version " + std::to_string(version));
  ModelConfig config = model_config_from_json(r.str());
  const std::uint32_t n = r.u32();
  ParamSet params;
  for (std::uint32_t i = 0; i < n; ++i) {
    auto [name, t] = read_tensor_record(r);
    params.add(std::move(name), std::move(t));
  }
  if (!r.at_end()) fail(ErrorKind::File, source + ": trailing bytes after tensor records");
  return Model(config, std::move(params));
}

void save_checkpoint(const std::filesystem::path& path, const Model& model, DType dtype) {
  io::write_file(path, encode_checkpoint(model, dtype));
}

Model load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(io::read_file(path), path.string());
}

}  // namespace storm::model
