#include "glassbox/checkpoint.hpp"

#include <cstring>

#include "glassbox/config.hpp"
#include "glassbox/io.hpp"

namespace glassbox {

namespace {

constexpr char kMagic[4] = {'G', 'B', 'X', 'M'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_f32(std::vector<std::uint8_t>& out, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, sizeof bits);
  put_u32(out, bits);
}

bool is_vector_tensor(const std::string& name) {
  return name.ends_with("_gain") || name.ends_with("_bias") || name.ends_with("b_up") ||
         name.ends_with("b_down");
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32(const char* what) {
    const std::uint32_t bits = u32(what);
    float f;
    std::memcpy(&f, &bits, sizeof f);
    return f;
  }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n, const char* what) {
    if (remaining() < n) {
      throw CheckpointError(CheckpointError::Kind::truncated,
                            std::string("truncated checkpoint while reading ") + what);
    }
  }
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> save_checkpoint(const ModelF& model, const std::string& tag) {
  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  put_u32(out, kCheckpointVersion);
  nlohmann::json meta;
  meta["model"] = model_config_to_json(model.config);
  meta["tag"] = tag;
  const std::string doc = meta.dump();
  put_u32(out, static_cast<std::uint32_t>(doc.size()));
  out.insert(out.end(), doc.begin(), doc.end());
  model.params.visit([&out](const std::string& name, const MatrixF& m) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    if (is_vector_tensor(name)) {
      put_u32(out, 1);
      put_u32(out, static_cast<std::uint32_t>(m.size()));
    } else {
      put_u32(out, 2);
      put_u32(out, static_cast<std::uint32_t>(m.rows()));
      put_u32(out, static_cast<std::uint32_t>(m.cols()));
    }
    for (float v : m.values()) put_f32(out, v);
  });
  return out;
}

Checkpoint load_checkpoint(std::span<const std::uint8_t> bytes, const ModelConfig* declared) {
  using Kind = CheckpointError::Kind;
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw CheckpointError(Kind::bad_magic, "bad magic: not a GBXM checkpoint");
  }
  Reader r(bytes.subspan(4));
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion) {
    throw CheckpointError(Kind::bad_version, "unsupported checkpoint version " +
                                                 std::to_string(version) + " (expected " +
                                                 std::to_string(kCheckpointVersion) + ")");
  }
  const std::uint32_t meta_len = r.u32("metadata length");
  const std::string doc = r.str(meta_len, "metadata");

  Checkpoint ckpt;
  try {
    const auto meta = nlohmann::json::parse(doc);
    ckpt.model.config = model_config_from_json(meta.at("model"));
    ckpt.tag = meta.value("tag", std::string{});
    ckpt.model.config.validate();
  } catch (const std::exception& e) {
    throw CheckpointError(Kind::bad_metadata, std::string("bad checkpoint metadata: ") + e.what());
  }
  if (declared && !(*declared == ckpt.model.config)) {
    throw CheckpointError(Kind::shape_mismatch,
                          "checkpoint config differs from the declared model config");
  }

  ckpt.model.params = ModelParams<float>::zeros(ckpt.model.config);
  ckpt.model.params.visit([&r](const std::string& name, MatrixF& m) {
    const std::uint32_t name_len = r.u32("tensor name length");
    const std::string stored = r.str(name_len, "tensor name");
    if (stored != name) {
      throw CheckpointError(Kind::shape_mismatch,
                            "expected tensor '" + name + "', found '" + stored + "'");
    }
    const std::uint32_t rank = r.u32("tensor rank");
    if (rank != 1 && rank != 2) {
      throw CheckpointError(Kind::shape_mismatch,
                            "tensor '" + name + "' has unsupported rank " + std::to_string(rank));
    }
    std::size_t rows = 1, cols = 0;
    if (rank == 1) {
      cols = r.u32("tensor dims");
    } else {
      rows = r.u32("tensor dims");
      cols = r.u32("tensor dims");
    }
    if (rows != m.rows() || cols != m.cols()) {
      throw CheckpointError(Kind::shape_mismatch, "tensor '" + name + "' stored as " +
                                                      std::to_string(rows) + "x" +
                                                      std::to_string(cols) + ", config expects " +
                                                      m.shape_string());
    }
    for (float& v : m.values()) v = r.f32("tensor data");
  });
  if (r.remaining() != 0) {
    throw CheckpointError(Kind::trailing_data, std::to_string(r.remaining()) +
                                                   " unexpected bytes after the last tensor");
  }
  return ckpt;
}

void write_checkpoint_file(const std::filesystem::path& path, const ModelF& model,
                           const std::string& tag) {
  const auto bytes = save_checkpoint(model, tag);
  io::write_file_atomic(path, std::span<const std::uint8_t>(bytes));
}

Checkpoint read_checkpoint_file(const std::filesystem::path& path, const ModelConfig* declared) {
  if (!std::filesystem::exists(path)) {
    throw std::runtime_error("checkpoint not found: " + path.string());
  }
  const auto bytes = io::read_binary_file(path);
  return load_checkpoint(bytes, declared);
}

}  // namespace glassbox
