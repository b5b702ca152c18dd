#include "defnet/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include "defnet/config.hpp"

namespace defnet {

namespace {

constexpr char kMagic[4] = {'D', 'F', 'N', 'T'};
constexpr std::size_t kMaxRank = 8;

std::string metadata_text(const Checkpoint& c) {
  std::ostringstream os;
  os << model_spec_to_text(c.spec);
  os << "meta.epochs = " << c.meta.epochs << "\n";
  os << "meta.seed = " << c.meta.seed << "\n";
  os << "meta.train_accuracy = " << format_double(c.meta.train_accuracy) << "\n";
  os << "meta.test_accuracy = " << format_double(c.meta.test_accuracy) << "\n";
  return os.str();
}

void parse_metadata(const std::string& text, const std::string& origin, Checkpoint& c) {
  ConfigText cfg = ConfigText::parse(text, origin);
  ConfigText model_part;
  for (const ConfigEntry& e : cfg.entries()) {
    if (e.key == "meta.epochs") {
      c.meta.epochs = parse_size(e);
    } else if (e.key == "meta.seed") {
      c.meta.seed = parse_u64(e);
    } else if (e.key == "meta.train_accuracy") {
      c.meta.train_accuracy = parse_double(e);
    } else if (e.key == "meta.test_accuracy") {
      c.meta.test_accuracy = parse_double(e);
    } else {
      model_part.add(e);
    }
  }
  c.spec = model_spec_from_config(model_part);
}

class Writer {
 public:
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u16(std::uint16_t v) {
    for (int i = 0; i < 2; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  std::vector<std::uint8_t>& buffer() { return out_; }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  Reader(const std::vector<std::uint8_t>& b, std::size_t end, const std::string& origin)
      : b_(b), end_(end), origin_(origin) {}

  void need(std::size_t n, const char* what) const {
    if (pos_ + n > end_) {
      throw DataError(DataError::Kind::kTruncated, origin_, pos_,
                      std::string("file ends inside ") + what);
    }
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return b_[pos_++];
  }
  std::uint16_t u16(const char* what) {
    need(2, what);
    const std::uint16_t v = static_cast<std::uint16_t>(b_[pos_] | (b_[pos_ + 1] << 8));
    pos_ += 2;
    return v;
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t{b_[pos_ + i]} << (8 * i);
    pos_ += 4;
    return v;
  }
  const std::uint8_t* take(std::size_t n, const char* what) {
    need(n, what);
    const std::uint8_t* p = b_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::size_t pos() const { return pos_; }

 private:
  const std::vector<std::uint8_t>& b_;
  std::size_t end_;
  const std::string& origin_;
  std::size_t pos_ = 0;
};

std::uint32_t crc32_of(const std::uint8_t* p, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  while (n > 0) {
    const uInt chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = crc32(crc, p, chunk);
    p += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

void write_entry(Writer& w, const std::string& name, EntryKind kind, const Tensor& t) {
  if (name.size() > 0xffff) throw ConfigError("checkpoint entry name too long");
  if (t.rank() > kMaxRank) throw DimensionError("checkpoint tensor rank too large");
  w.u16(static_cast<std::uint16_t>(name.size()));
  w.bytes(name.data(), name.size());
  w.u8(static_cast<std::uint8_t>(kind));
  w.u8(static_cast<std::uint8_t>(t.rank()));
  for (std::size_t d : t.shape()) {
    if (d > 0xffffffffu) throw DimensionError("checkpoint dimension too large");
    w.u32(static_cast<std::uint32_t>(d));
  }
  if (kind == EntryKind::kMask || kind == EntryKind::kMetadata) {
    auto v = t.data<std::uint8_t>();
    w.bytes(v.data(), v.size());
  } else {
    const Tensor f = t.to(DType::kFloat32);
    for (float x : f.data<float>()) w.u32(std::bit_cast<std::uint32_t>(x));
  }
}

Tensor text_tensor(const std::string& text) {
  return Tensor::from<std::uint8_t>({text.size()},
                                    std::vector<std::uint8_t>(text.begin(), text.end()));
}

}  // namespace

Checkpoint make_checkpoint(const Model& model, const TrainingMetadata& meta) {
  Checkpoint c;
  c.spec = model.spec();
  c.meta = meta;
  // parameters() hands out mutable pointers; nothing is modified here.
  for (const ParamRef& p : const_cast<Model&>(model).parameters()) {
    c.entries.push_back({p.name, EntryKind::kParam, p.tensor->to(DType::kFloat32)});
  }
  for (const BufferRef& b : model.buffers()) {
    c.entries.push_back({b.name, EntryKind::kBnStat, b.tensor->to(DType::kFloat32)});
  }
  for (const auto& [name, mask] : model.masks()) {
    c.entries.push_back({name, EntryKind::kMask, mask->bits()});
  }
  return c;
}

Model restore_model(const Checkpoint& ckpt) {
  Model m = build_model(ckpt.spec);
  std::map<std::string, const CheckpointEntry*> by_name;
  for (const CheckpointEntry& e : ckpt.entries) {
    if (!by_name.emplace(e.name, &e).second) {
      throw DataError(DataError::Kind::kMalformed, "<checkpoint>", 0,
                      "duplicate entry '" + e.name + "'");
    }
  }
  std::size_t used = 0;
  auto fetch = [&](const std::string& name, EntryKind kind, const Shape& shape) -> const Tensor& {
    auto it = by_name.find(name);
    if (it == by_name.end() || it->second->kind != kind) {
      throw DataError(DataError::Kind::kMalformed, "<checkpoint>", 0,
                      "missing entry '" + name + "'");
    }
    if (it->second->tensor.shape() != shape) {
      throw DataError(DataError::Kind::kMalformed, "<checkpoint>", 0,
                      "entry '" + name + "' has shape " + shape_string(it->second->tensor.shape()) +
                          ", model expects " + shape_string(shape));
    }
    ++used;
    return it->second->tensor;
  };
  for (const ParamRef& p : m.parameters()) {
    *p.tensor = fetch(p.name, EntryKind::kParam, p.tensor->shape()).to(p.tensor->dtype());
    p.tensor->set_requires_grad(true);
  }
  for (ModelBlock& blk : m.blocks()) {
    for (auto* units : {&blk.convs, &blk.shortcuts}) {
      for (ConvUnit& u : *units) {
        if (u.name.empty()) continue;
        u.bn.running_mean =
            fetch(u.name + ".bn.running_mean", EntryKind::kBnStat, u.bn.running_mean.shape());
        u.bn.running_var =
            fetch(u.name + ".bn.running_var", EntryKind::kBnStat, u.bn.running_var.shape());
        if (u.spec.mask) {
          const Shape shape = u.spec.mask->shape();
          const double keep = u.spec.mask->keep_prob();
          const std::uint64_t seed = u.spec.mask->seed();
          const MaskVariant variant = u.spec.mask->variant();
          u.spec.mask.emplace(fetch(u.name + ".mask", EntryKind::kMask, shape), keep, seed,
                              variant);
        }
      }
    }
  }
  m.set_input_mean(fetch("input.mean", EntryKind::kBnStat, m.input_mean().shape()));
  if (used != ckpt.entries.size()) {
    for (const CheckpointEntry& e : ckpt.entries) {
      bool known = false;
      for (const ParamRef& p : m.parameters()) known |= p.name == e.name;
      for (const BufferRef& b : m.buffers()) known |= b.name == e.name;
      for (const auto& mk : m.masks()) known |= mk.first == e.name;
      if (!known) {
        throw DataError(DataError::Kind::kMalformed, "<checkpoint>", 0,
                        "unexpected entry '" + e.name + "'");
      }
    }
  }
  return m;
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  Writer w;
  w.bytes(kMagic, 4);
  w.u32(Checkpoint::kVersion);
  w.u32(static_cast<std::uint32_t>(ckpt.entries.size() + 1));
  write_entry(w, "meta", EntryKind::kMetadata, text_tensor(metadata_text(ckpt)));
  for (const CheckpointEntry& e : ckpt.entries) write_entry(w, e.name, e.kind, e.tensor);
  const std::uint32_t crc = crc32_of(w.buffer().data(), w.buffer().size());
  w.u32(crc);
  return std::move(w.buffer());
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes, const std::string& origin) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw DataError(DataError::Kind::kBadMagic, origin, 0, "not a DFNT checkpoint");
  }
  if (bytes.size() < 16) {
    throw DataError(DataError::Kind::kTruncated, origin, bytes.size(), "file ends inside header");
  }
  const std::size_t body_end = bytes.size() - 4;
  Reader r(bytes, body_end, origin);
  r.take(4, "magic");
  const std::uint32_t version = r.u32("version");
  if (version != Checkpoint::kVersion) {
    throw DataError(DataError::Kind::kVersionMismatch, origin, 4,
                    "version " + std::to_string(version) + ", expected " +
                        std::to_string(Checkpoint::kVersion));
  }
  const std::uint32_t count = r.u32("entry count");
  Checkpoint c;
  bool have_meta = false;
  std::string meta_text;
  std::size_t meta_offset = 0;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t entry_start = r.pos();
    const std::uint16_t name_len = r.u16("entry name length");
    const std::uint8_t* name_p = r.take(name_len, "entry name");
    std::string name(reinterpret_cast<const char*>(name_p), name_len);
    const std::uint8_t kind_byte = r.u8("entry kind");
    if (kind_byte > static_cast<std::uint8_t>(EntryKind::kMetadata)) {
      throw DataError(DataError::Kind::kMalformed, origin, r.pos() - 1,
                      "unknown entry kind " + std::to_string(kind_byte));
    }
    const auto kind = static_cast<EntryKind>(kind_byte);
    const std::uint8_t rank = r.u8("entry rank");
    if (rank > kMaxRank) {
      throw DataError(DataError::Kind::kMalformed, origin, r.pos() - 1,
                      "rank " + std::to_string(rank) + " too large");
    }
    Shape shape(rank);
    for (auto& d : shape) d = r.u32("entry dims");
    const std::size_t numel = shape_numel(shape);
    const bool bytes_payload = kind == EntryKind::kMask || kind == EntryKind::kMetadata;
    const std::size_t payload = numel * (bytes_payload ? 1 : 4);
    if (payload / (bytes_payload ? 1 : 4) != numel || r.pos() + payload > body_end) {
      throw DataError(DataError::Kind::kTruncated, origin, r.pos(),
                      "tensor '" + name + "' payload runs past the end of the file");
    }
    const std::uint8_t* p = r.take(payload, "tensor payload");
    Tensor t;
    if (bytes_payload) {
      t = Tensor::from<std::uint8_t>(shape, std::vector<std::uint8_t>(p, p + payload));
    } else {
      std::vector<float> v(numel);
      for (std::size_t k = 0; k < numel; ++k) {
        std::uint32_t u = 0;
        for (int b = 0; b < 4; ++b) u |= std::uint32_t{p[4 * k + b]} << (8 * b);
        v[k] = std::bit_cast<float>(u);
      }
      t = Tensor::from<float>(shape, std::move(v));
    }
    if (kind == EntryKind::kMetadata) {
      if (have_meta) {
        throw DataError(DataError::Kind::kMalformed, origin, entry_start, "second metadata entry");
      }
      have_meta = true;
      auto text = t.data<std::uint8_t>();
      meta_text.assign(text.begin(), text.end());
      meta_offset = entry_start;
    } else {
      c.entries.push_back({std::move(name), kind, std::move(t)});
    }
  }
  if (r.pos() != body_end) {
    throw DataError(DataError::Kind::kMalformed, origin, r.pos(),
                    std::to_string(body_end - r.pos()) + " unexpected bytes after the entries");
  }
  std::uint32_t stored = 0;
  for (int b = 0; b < 4; ++b) stored |= std::uint32_t{bytes[body_end + b]} << (8 * b);
  const std::uint32_t actual = crc32_of(bytes.data(), body_end);
  if (stored != actual) {
    char buf[80];
    std::snprintf(buf, sizeof buf, "CRC32 0x%08x, computed 0x%08x", stored, actual);
    throw DataError(DataError::Kind::kChecksumMismatch, origin, body_end, buf);
  }
  if (!have_meta) throw DataError(DataError::Kind::kMalformed, origin, 12, "no metadata entry");
  try {
    parse_metadata(meta_text, origin + ":meta", c);
  } catch (const ConfigError& e) {
    throw DataError(DataError::Kind::kMalformed, origin, meta_offset, e.what());
  }
  return c;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const std::vector<std::uint8_t> bytes = encode_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError(DataError::Kind::kIo, path.string(), 0, "cannot open for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError(DataError::Kind::kIo, path.string(), 0, "write failed");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::error_code ec;
  if (!std::filesystem::is_regular_file(path, ec)) {
    throw DataError(DataError::Kind::kMissingFile, path.string(), 0, "no such file");
  }
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(DataError::Kind::kIo, path.string(), 0, "cannot open");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes, path.string());
}

}  // namespace defnet
