#include "casvit/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <map>

#include "binary_io.hpp"

namespace casvit {

const char* checkpoint_errc_name(CheckpointErrc code) {
  switch (code) {
    case CheckpointErrc::io: return "io";
    case CheckpointErrc::bad_magic: return "bad_magic";
    case CheckpointErrc::version_mismatch: return "version_mismatch";
    case CheckpointErrc::truncated: return "truncated";
    case CheckpointErrc::overlapping_offsets: return "overlapping_offsets";
    case CheckpointErrc::bad_config: return "bad_config";
    case CheckpointErrc::bad_dtype: return "bad_dtype";
    case CheckpointErrc::missing_tensor: return "missing_tensor";
    case CheckpointErrc::shape_mismatch: return "shape_mismatch";
  }
  return "?";
}

namespace {

std::size_t dtype_size(DType d) { return d == DType::f32 ? 4 : 8; }

template <typename T>
struct Collected {
  std::string name;
  Tensor<T>* tensor;
};

template <typename T>
std::vector<Collected<T>> collect(Model<T>& model) {
  std::vector<Collected<T>> out;
  visit<T>(model, [&](const std::string& name, Tensor<T>& t, ParamRole) { out.push_back({name, &t}); });
  return out;
}

}  // namespace

template <typename T>
std::vector<std::uint8_t> encode_checkpoint(Model<T>& model) {
  const auto tensors = collect(model);
  const std::string config = model.config.to_json();
  io::Writer header;
  header.bytes(std::string("CASV"));
  header.put<std::uint16_t>(kCheckpointVersion);
  header.put<std::uint32_t>(static_cast<std::uint32_t>(config.size()));
  header.bytes(config);
  header.put<std::uint32_t>(static_cast<std::uint32_t>(tensors.size()));

  std::size_t table_bytes = 0;
  for (const auto& t : tensors) table_bytes += 2 + t.name.size() + 2 + 4 * t.tensor->rank() + 8;
  std::uint64_t offset = header.size() + table_bytes;
  for (const auto& t : tensors) {
    if (t.name.size() > UINT16_MAX) throw CheckpointError(CheckpointErrc::io, "tensor name too long");
    header.put<std::uint16_t>(static_cast<std::uint16_t>(t.name.size()));
    header.bytes(t.name);
    header.put<std::uint8_t>(static_cast<std::uint8_t>(dtype_of<T>));
    header.put<std::uint8_t>(static_cast<std::uint8_t>(t.tensor->rank()));
    for (auto e : t.tensor->shape()) header.put<std::uint32_t>(static_cast<std::uint32_t>(e));
    header.put<std::uint64_t>(offset);
    offset += t.tensor->numel() * sizeof(T);
  }
  using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  for (const auto& t : tensors) {
    for (T v : t.tensor->data()) header.put<Bits>(std::bit_cast<Bits>(v));
  }
  return std::move(header.buffer());
}

CheckpointView decode_checkpoint(std::span<const std::uint8_t> bytes) {
  using E = CheckpointErrc;
  io::Reader r(bytes);
  const auto magic = r.take(4);
  if (!magic) throw CheckpointError(E::truncated, "file is shorter than the magic number");
  if (std::memcmp(magic->data(), "CASV", 4) != 0) throw CheckpointError(E::bad_magic, "not a checkpoint file");
  const auto version = r.get<std::uint16_t>();
  if (!version) throw CheckpointError(E::truncated, "header ends before the version field");
  if (*version != kCheckpointVersion) {
    throw CheckpointError(E::version_mismatch, "file version " + std::to_string(*version) +
                                                   ", reader supports " + std::to_string(kCheckpointVersion));
  }
  const auto config_len = r.get<std::uint32_t>();
  if (!config_len) throw CheckpointError(E::truncated, "header ends before the config length");
  const auto config_bytes = r.take(*config_len);
  if (!config_bytes) throw CheckpointError(E::truncated, "config document is cut short");
  CheckpointView view;
  try {
    view.config = VariantConfig::from_json(
        std::string_view(reinterpret_cast<const char*>(config_bytes->data()), config_bytes->size()));
  } catch (const std::exception& e) {
    throw CheckpointError(E::bad_config, e.what());
  }
  const auto count = r.get<std::uint32_t>();
  if (!count) throw CheckpointError(E::truncated, "header ends before the entry count");
  for (std::uint32_t i = 0; i < *count; ++i) {
    CheckpointEntry e;
    const auto name_len = r.get<std::uint16_t>();
    if (!name_len) throw CheckpointError(E::truncated, "entry table is cut short");
    const auto name = r.take(*name_len);
    const auto dtype = r.get<std::uint8_t>();
    const auto rank = r.get<std::uint8_t>();
    if (!name || !dtype || !rank) throw CheckpointError(E::truncated, "entry table is cut short");
    e.name.assign(name->begin(), name->end());
    if (*dtype > 1) {
      throw CheckpointError(E::bad_dtype, "entry '" + e.name + "' has dtype tag " + std::to_string(*dtype));
    }
    e.dtype = static_cast<DType>(*dtype);
    for (std::uint8_t d = 0; d < *rank; ++d) {
      const auto extent = r.get<std::uint32_t>();
      if (!extent) throw CheckpointError(E::truncated, "entry table is cut short");
      e.shape.push_back(*extent);
    }
    const auto offset = r.get<std::uint64_t>();
    if (!offset) throw CheckpointError(E::truncated, "entry table is cut short");
    e.offset = *offset;
    view.entries.push_back(std::move(e));
  }
  const std::uint64_t data_start = r.pos();
  std::vector<const CheckpointEntry*> order;
  for (auto& e : view.entries) {
    const std::uint64_t size = shape_numel(e.shape) * dtype_size(e.dtype);
    if (e.offset < data_start) {
      throw CheckpointError(E::overlapping_offsets, "payload of '" + e.name + "' overlaps the header");
    }
    if (e.offset > bytes.size() || size > bytes.size() - e.offset) {
      throw CheckpointError(E::truncated, "payload of '" + e.name + "' extends past the end of the file");
    }
    e.payload = bytes.subspan(e.offset, size);
    order.push_back(&e);
  }
  std::sort(order.begin(), order.end(), [](auto* a, auto* b) { return a->offset < b->offset; });
  for (std::size_t i = 1; i < order.size(); ++i) {
    if (order[i]->offset < order[i - 1]->offset + order[i - 1]->payload.size()) {
      throw CheckpointError(E::overlapping_offsets,
                            "payloads of '" + order[i - 1]->name + "' and '" + order[i]->name + "' overlap");
    }
  }
  return view;
}

namespace {
template <typename T>
void read_payload(const CheckpointEntry& e, Tensor<T>& dst) {
  auto out = dst.data();
  io::Reader r(e.payload);
  for (auto& v : out) {
    if (e.dtype == DType::f32) v = static_cast<T>(std::bit_cast<float>(*r.get<std::uint32_t>()));
    else v = static_cast<T>(std::bit_cast<double>(*r.get<std::uint64_t>()));
  }
}
}  // namespace

template <typename T>
void assign_checkpoint(Model<T>& model, const CheckpointView& view) {
  std::map<std::string, const CheckpointEntry*> by_name;
  for (const auto& e : view.entries) {
    if (!by_name.emplace(e.name, &e).second) {
      throw CheckpointError(CheckpointErrc::bad_config, "duplicate entry '" + e.name + "'");
    }
  }
  auto targets = collect(model);
  std::vector<const CheckpointEntry*> sources;
  for (const auto& t : targets) {
    const auto it = by_name.find(t.name);
    if (it == by_name.end()) throw CheckpointError(CheckpointErrc::missing_tensor, "no entry for '" + t.name + "'");
    if (it->second->shape != t.tensor->shape()) {
      throw CheckpointError(CheckpointErrc::shape_mismatch,
                            "'" + t.name + "' is " + shape_str(it->second->shape) + " in the file, model expects " +
                                shape_str(t.tensor->shape()));
    }
    sources.push_back(it->second);
  }
  for (std::size_t i = 0; i < targets.size(); ++i) {
    read_payload(*sources[i], *targets[i].tensor);
  }
}

template <typename T>
void save_checkpoint(Model<T>& model, const std::filesystem::path& path) {
  if (!io::write_file(path, encode_checkpoint(model))) {
    throw CheckpointError(CheckpointErrc::io, "cannot write " + path.string());
  }
}

template <typename T>
Model<T> load_checkpoint(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  if (!bytes) throw CheckpointError(CheckpointErrc::io, "cannot read " + path.string());
  const CheckpointView view = decode_checkpoint(*bytes);
  Model<T> model = build_variant<T>(view.config, 0);
  assign_checkpoint(model, view);
  return model;
}

template <typename T>
void load_checkpoint_into(Model<T>& model, const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  if (!bytes) throw CheckpointError(CheckpointErrc::io, "cannot read " + path.string());
  assign_checkpoint(model, decode_checkpoint(*bytes));
}

#define CASVIT_INSTANTIATE_CHECKPOINT(T)                                          \
  template std::vector<std::uint8_t> encode_checkpoint(Model<T>&);                \
  template void assign_checkpoint(Model<T>&, const CheckpointView&);              \
  template void save_checkpoint(Model<T>&, const std::filesystem::path&);         \
  template Model<T> load_checkpoint(const std::filesystem::path&);                \
  template void load_checkpoint_into(Model<T>&, const std::filesystem::path&);

CASVIT_INSTANTIATE_CHECKPOINT(float)
CASVIT_INSTANTIATE_CHECKPOINT(double)
#undef CASVIT_INSTANTIATE_CHECKPOINT

}  // namespace casvit
