#include "tsr/weights.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "json.hpp"

namespace tsr {

namespace {

using Kind = WeightFileError::Kind;
constexpr std::size_t kMagicLen = sizeof(kWeightMagic) - 1;

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  template <typename U>
  void le(U v) {
    if constexpr (std::endian::native == std::endian::big) v = byteswap(v);
    bytes(&v, sizeof(v));
  }
  void str(std::string_view s) {
    le(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  std::vector<std::uint8_t>& buffer() { return out_; }

  template <typename U>
  static U byteswap(U v) {
    std::uint8_t b[sizeof(U)];
    std::memcpy(b, &v, sizeof(U));
    std::reverse(b, b + sizeof(U));
    std::memcpy(&v, b, sizeof(U));
    return v;
  }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}

  template <typename U>
  U le() {
    U v;
    take(&v, sizeof(v));
    if constexpr (std::endian::native == std::endian::big) v = Writer::byteswap(v);
    return v;
  }
  std::string str() {
    const auto n = le<std::uint32_t>();
    std::string s(n, '\0');
    take(s.data(), n);
    return s;
  }
  void take(void* dst, std::size_t n) {
    if (n > in_.size() - pos_) throw WeightFileError(Kind::kFormat, "weight file entry runs past the end of the payload");
    std::memcpy(dst, in_.data() + pos_, n);
    pos_ += n;
  }
  bool done() const { return pos_ == in_.size(); }

 private:
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

std::uint32_t crc_of(std::span<const std::uint8_t> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in bounded chunks.
  std::size_t done = 0;
  while (done < bytes.size()) {
    const auto n = static_cast<uInt>(std::min<std::size_t>(bytes.size() - done, 1u << 30));
    crc = crc32(crc, bytes.data() + done, n);
    done += n;
  }
  return static_cast<std::uint32_t>(crc);
}

void write_entry(Writer& w, std::uint8_t kind, const NamedTensor<float>& e) {
  w.le(kind);
  w.str(e.name);
  w.le(static_cast<std::uint32_t>(e.value.rank()));
  for (auto d : e.value.shape()) w.le(static_cast<std::uint64_t>(d));
  for (float v : e.value.data()) w.le(std::bit_cast<std::uint32_t>(v));
}

ModelF skeleton(const ModelSpec& spec) {
  return std::visit(
      [](const auto& s) -> ModelF {
        using S = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<S, GeneratorSpec>) return build_generator<float>(s, 0);
        else if constexpr (std::is_same_v<S, DiscriminatorSpec>) return build_discriminator<float>(s, 0);
        else return ModelF{};
      },
      spec);
}

void fill_from(std::span<const std::uint8_t> bytes, ModelF& model) {
  // `model` is replaced by a skeleton of the stored spec, then filled.
  if (bytes.size() < kMagicLen || std::memcmp(bytes.data(), kWeightMagic, kMagicLen) != 0) {
    throw WeightFileError(Kind::kMagic, "not a weight file (bad magic)");
  }
  if (bytes.size() < kMagicLen + 4 + 4) throw WeightFileError(Kind::kChecksum, "weight file truncated: checksum mismatch");
  const auto body = bytes.first(bytes.size() - 4);
  Reader tail(bytes.last(4));
  if (tail.le<std::uint32_t>() != crc_of(body)) throw WeightFileError(Kind::kChecksum, "weight file checksum mismatch");

  Reader r(body.subspan(kMagicLen));
  const auto version = r.le<std::uint32_t>();
  if (version != kWeightFormatVersion) {
    throw WeightFileError(Kind::kVersion, "unsupported weight format version " + std::to_string(version));
  }
  ModelSpec spec;
  try {
    spec = spec_from_json(r.str());
  } catch (const std::exception& e) {
    throw WeightFileError(Kind::kFormat, std::string("bad spec descriptor: ") + e.what());
  }
  try {
    model = skeleton(spec);
  } catch (const SpecError& e) {
    throw WeightFileError(Kind::kFormat, std::string("stored spec is invalid: ") + e.what());
  }

  const auto count = r.le<std::uint32_t>();
  if (count != model.parameters().size() + model.buffers().size()) {
    throw WeightFileError(Kind::kFormat, "entry count " + std::to_string(count) + " does not match the spec");
  }
  std::size_t pi = 0, bi = 0;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto kind = r.le<std::uint8_t>();
    const auto name = r.str();
    NamedTensor<float>* slot = nullptr;
    if (kind == 0 && pi < model.parameters().size()) slot = &model.parameters()[pi++];
    else if (kind == 1 && bi < model.buffers().size()) slot = &model.buffers()[bi++];
    if (slot == nullptr || slot->name != name) throw WeightFileError(Kind::kFormat, "unexpected entry '" + name + "'");
    const auto rank = r.le<std::uint32_t>();
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::int64_t>(r.le<std::uint64_t>());
    if (shape != slot->value.shape()) {
      throw WeightFileError(Kind::kFormat, "entry '" + name + "' has shape " + shape_str(shape) + ", expected " +
                                               shape_str(slot->value.shape()));
    }
    for (auto& v : slot->value.mutable_data()) v = std::bit_cast<float>(r.le<std::uint32_t>());
  }
  if (!r.done()) throw WeightFileError(Kind::kFormat, "trailing bytes after the last entry");
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw WeightFileError(Kind::kIo, path.string() + ": cannot open weight file");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

std::string_view to_string(WeightFileError::Kind kind) {
  switch (kind) {
    case Kind::kIo: return "io";
    case Kind::kMagic: return "magic";
    case Kind::kVersion: return "version";
    case Kind::kChecksum: return "checksum";
    case Kind::kFormat: return "format";
    case Kind::kSpecMismatch: return "spec_mismatch";
  }
  return "unknown";
}

std::string spec_to_json(const ModelSpec& spec) {
  nlohmann::ordered_json j;
  if (const auto* g = std::get_if<GeneratorSpec>(&spec)) {
    j["kind"] = "generator";
    j["scale"] = g->scale;
    j["base_channels"] = g->base_channels;
    j["n_res_blocks"] = g->n_res_blocks;
    j["use_bn"] = g->use_bn;
    j["upsampler"] = std::string(to_string(g->upsampler));
    j["in_channels"] = g->in_channels;
    j["out_channels"] = g->out_channels;
    j["edge_kernel"] = g->edge_kernel;
  } else if (const auto* d = std::get_if<DiscriminatorSpec>(&spec)) {
    j["kind"] = "discriminator";
    j["conv_block_channels"] = d->conv_block_channels;
    j["head"] = std::string(to_string(d->head));
    j["leaky_slope"] = d->leaky_slope;
    j["in_channels"] = d->in_channels;
    j["input_size"] = d->input_size;
    j["dense_units"] = d->dense_units;
  } else {
    j["kind"] = "empty";
  }
  return j.dump();
}

ModelSpec spec_from_json(std::string_view text) {
  const auto j = nlohmann::json::parse(text);
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "generator") {
    GeneratorSpec g;
    g.scale = j.at("scale").get<int>();
    g.base_channels = j.at("base_channels").get<int>();
    g.n_res_blocks = j.at("n_res_blocks").get<int>();
    g.use_bn = j.at("use_bn").get<bool>();
    g.upsampler = parse_upsampler(j.at("upsampler").get<std::string>());
    g.in_channels = j.at("in_channels").get<int>();
    g.out_channels = j.at("out_channels").get<int>();
    g.edge_kernel = j.at("edge_kernel").get<int>();
    return g;
  }
  if (kind == "discriminator") {
    DiscriminatorSpec d;
    d.conv_block_channels = j.at("conv_block_channels").get<std::vector<int>>();
    d.head = parse_head(j.at("head").get<std::string>());
    d.leaky_slope = j.at("leaky_slope").get<double>();
    d.in_channels = j.at("in_channels").get<int>();
    d.input_size = j.at("input_size").get<int>();
    d.dense_units = j.at("dense_units").get<int>();
    return d;
  }
  if (kind == "empty") return std::monostate{};
  throw SpecError("unknown model kind '" + kind + "'");
}

std::vector<std::uint8_t> serialize_weights(const ModelF& model) {
  Writer w;
  w.bytes(kWeightMagic, kMagicLen);
  w.le(kWeightFormatVersion);
  w.str(spec_to_json(model.spec()));
  w.le(static_cast<std::uint32_t>(model.parameters().size() + model.buffers().size()));
  for (const auto& p : model.parameters()) write_entry(w, 0, p);
  for (const auto& b : model.buffers()) write_entry(w, 1, b);
  const auto crc = crc_of(w.buffer());
  w.le(crc);
  return std::move(w.buffer());
}

ModelF deserialize_weights(std::span<const std::uint8_t> bytes) {
  ModelF model;
  fill_from(bytes, model);
  return model;
}

void save_weights(const ModelF& model, const std::filesystem::path& path) {
  const auto bytes = serialize_weights(model);
  // Write beside the target and rename, so readers never see a partial file.
  auto tmp = path;
  tmp += ".partial";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw WeightFileError(Kind::kIo, path.string() + ": cannot open for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw WeightFileError(Kind::kIo, path.string() + ": write failed");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw WeightFileError(Kind::kIo, path.string() + ": " + ec.message());
}

ModelF load_weights(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  try {
    return deserialize_weights(bytes);
  } catch (const WeightFileError& e) {
    throw WeightFileError(e.kind(), path.string() + ": " + e.what());
  }
}

void load_weights_into(const std::filesystem::path& path, ModelF& model) {
  const ModelF loaded = load_weights(path);
  if (!(loaded.spec() == model.spec())) {
    throw WeightFileError(Kind::kSpecMismatch, path.string() + ": stored spec " + spec_to_json(loaded.spec()) +
                                                   " does not match model spec " + spec_to_json(model.spec()));
  }
  for (std::size_t i = 0; i < model.parameters().size(); ++i) {
    const auto src = loaded.parameters()[i].value.data();
    std::copy(src.begin(), src.end(), model.parameters()[i].value.mutable_data().begin());
  }
  for (std::size_t i = 0; i < model.buffers().size(); ++i) {
    const auto src = loaded.buffers()[i].value.data();
    std::copy(src.begin(), src.end(), model.buffers()[i].value.mutable_data().begin());
  }
}

}  // namespace tsr
