#include "memcomputer/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <map>

namespace memcomputer {

namespace {

constexpr std::array<char, 8> kMagic{'M', 'E', 'M', 'C', 'K', 'P', 'T', '\0'};

// Explicit little-endian encoding, independent of the host byte order.
void put_u64(std::ostream& out, std::uint64_t v) {
  std::array<char, 8> b;
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(b.data(), 8);
}

void put_u32(std::ostream& out, std::uint32_t v) {
  std::array<char, 4> b;
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(b.data(), 4);
}

class Reader {
 public:
  Reader(std::istream& in, std::string source) : in_(in), source_(std::move(source)) {}

  void bytes(char* dst, std::size_t n) {
    in_.read(dst, static_cast<std::streamsize>(n));
    if (in_.gcount() != static_cast<std::streamsize>(n)) fail("truncated file");
  }
  std::uint64_t u64() {
    std::array<unsigned char, 8> b;
    bytes(reinterpret_cast<char*>(b.data()), 8);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
    return v;
  }
  std::uint32_t u32() {
    std::array<unsigned char, 4> b;
    bytes(reinterpret_cast<char*>(b.data()), 4);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
    return v;
  }
  // Guards allocations against corrupted length fields.
  std::uint64_t length(std::uint64_t limit, const char* what) {
    const std::uint64_t n = u64();
    if (n > limit) fail(std::string("implausible ") + what + " length " + std::to_string(n));
    return n;
  }
  [[noreturn]] void fail(const std::string& what) const { throw CheckpointError(source_ + ": " + what); }

 private:
  std::istream& in_;
  std::string source_;
};

void put_tensor(std::ostream& out, const std::string& name, const Tensor& t) {
  put_u32(out, static_cast<std::uint32_t>(name.size()));
  out.write(name.data(), static_cast<std::streamsize>(name.size()));
  put_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) put_u64(out, d);
  for (double v : t.data()) put_u64(out, std::bit_cast<std::uint64_t>(v));
}

struct StoredTensor {
  Shape shape;
  std::vector<double> values;
};

void restore(Tensor& dst, const std::string& name, std::map<std::string, StoredTensor>& stored,
             const Reader& reader) {
  auto it = stored.find(name);
  if (it == stored.end()) reader.fail("missing tensor '" + name + "'");
  if (it->second.shape != dst.shape()) {
    reader.fail("tensor '" + name + "' has shape " + shape_str(it->second.shape) + ", expected " +
                shape_str(dst.shape()));
  }
  std::copy(it->second.values.begin(), it->second.values.end(), dst.mutable_data().begin());
  stored.erase(it);
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const ParameterList params = ck.model.parameters();
  Json meta = {{"config", to_json(ck.model.config)},
               {"vocabulary", ck.vocabulary.tokens()},
               {"progress",
                {{"step", ck.progress.step},
                 {"epoch", ck.progress.epoch},
                 {"cursor", ck.progress.cursor},
                 {"dropout_rng", ck.progress.dropout_rng}}},
               {"train_config", ck.train_config},
               {"optimizer", ck.optimizer ? Json({{"step", ck.optimizer->step}}) : Json(nullptr)}};
  const std::string meta_text = meta.dump();

  // Write to a sibling and rename so a crash never leaves a torn checkpoint.
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write " + tmp.string());
    out.write(kMagic.data(), kMagic.size());
    put_u32(out, kCheckpointVersion);
    put_u64(out, meta_text.size());
    out.write(meta_text.data(), static_cast<std::streamsize>(meta_text.size()));
    const std::size_t n_opt = ck.optimizer ? 2 * params.size() : 0;
    put_u64(out, params.size() + n_opt);
    for (const NamedTensor& p : params) put_tensor(out, p.name, p.tensor);
    if (ck.optimizer) {
      if (ck.optimizer->acc.size() != params.size() || ck.optimizer->mom.size() != params.size()) {
        throw CheckpointError("optimizer state does not match the model parameters");
      }
      for (std::size_t i = 0; i < params.size(); ++i) {
        put_tensor(out, "optim.acc." + params[i].name, ck.optimizer->acc[i]);
        put_tensor(out, "optim.mom." + params[i].name, ck.optimizer->mom[i]);
      }
    }
    out.flush();
    if (!out) throw CheckpointError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  Reader r(in, path.string());
  std::array<char, 8> magic;
  r.bytes(magic.data(), magic.size());
  if (magic != kMagic) r.fail("not a checkpoint (bad magic)");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) r.fail("unsupported checkpoint version " + std::to_string(version));

  std::string meta_text(r.length(std::uint64_t{1} << 30, "metadata"), '\0');
  r.bytes(meta_text.data(), meta_text.size());
  Json meta;
  try {
    meta = Json::parse(meta_text);
  } catch (const Json::exception& e) {
    r.fail(std::string("corrupt metadata: ") + e.what());
  }

  std::map<std::string, StoredTensor> stored;
  const std::uint64_t count = r.length(1 << 20, "tensor table");
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = r.u32();
    if (name_len > 4096) r.fail("implausible tensor name length");
    std::string name(name_len, '\0');
    r.bytes(name.data(), name.size());
    StoredTensor t;
    const std::uint32_t rank = r.u32();
    if (rank > 8) r.fail("implausible rank for '" + name + "'");
    std::uint64_t numel = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      t.shape.push_back(r.length(std::uint64_t{1} << 32, "dimension"));
      numel *= t.shape.back();
    }
    if (numel > (std::uint64_t{1} << 32)) r.fail("implausible size for '" + name + "'");
    t.values.resize(numel);
    for (double& v : t.values) v = std::bit_cast<double>(r.u64());
    if (!stored.emplace(name, std::move(t)).second) r.fail("duplicate tensor '" + name + "'");
  }
  if (in.peek() != std::char_traits<char>::eof()) r.fail("trailing bytes after the tensor table");

  Checkpoint ck;
  try {
    ck.model = zero_model(model_config_from_json(meta.at("config")));
    ck.vocabulary = Vocabulary(meta.at("vocabulary").get<std::vector<std::string>>());
    const Json& p = meta.at("progress");
    ck.progress.step = p.at("step").get<std::size_t>();
    ck.progress.epoch = p.at("epoch").get<std::size_t>();
    ck.progress.cursor = p.at("cursor").get<std::size_t>();
    ck.progress.dropout_rng = p.at("dropout_rng").get<std::uint64_t>();
    ck.train_config = meta.at("train_config");
  } catch (const CheckpointError&) {
    throw;
  } catch (const std::exception& e) {
    r.fail(std::string("invalid metadata: ") + e.what());
  }

  const ParameterList params = ck.model.parameters();
  for (const NamedTensor& np : params) {
    Tensor t = np.tensor;
    restore(t, np.name, stored, r);
  }
  if (!meta.at("optimizer").is_null()) {
    OptimizerState opt;
    opt.step = meta.at("optimizer").at("step").get<std::size_t>();
    for (const NamedTensor& np : params) {
      Tensor acc(np.tensor.shape()), mom(np.tensor.shape());
      restore(acc, "optim.acc." + np.name, stored, r);
      restore(mom, "optim.mom." + np.name, stored, r);
      opt.acc.push_back(acc);
      opt.mom.push_back(mom);
    }
    ck.optimizer = std::move(opt);
  }
  if (!stored.empty()) r.fail("unexpected tensor '" + stored.begin()->first + "'");
  return ck;
}

}  // namespace memcomputer
