#include "capmem/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace capmem {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'C', 'M', 'E', 'M', 'C', 'K', 'P', 'T'};
constexpr uint32_t kVersion = 1;

template <class T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

void put_bytes(std::ostream& os, const void* p, size_t n) {
  os.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(n));
}

void put_string(std::ostream& os, const std::string& s) {
  put<uint64_t>(os, s.size());
  put_bytes(os, s.data(), s.size());
}

template <class T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw TensorError("checkpoint: truncated file");
  return v;
}

std::string get_string(std::istream& is) {
  const uint64_t n = get<uint64_t>(is);
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  if (!is) throw TensorError("checkpoint: truncated file");
  return s;
}

template <class VecT>
void put_floats(std::ostream& os, const VecT& v) {
  put<uint64_t>(os, v.size());
  put_bytes(os, v.data(), v.size() * sizeof(typename VecT::value_type));
}

std::vector<float> get_floats(std::istream& is) {
  const uint64_t n = get<uint64_t>(is);
  std::vector<float> v(n);
  is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(float)));
  if (!is) throw TensorError("checkpoint: truncated file");
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const Model& model, const std::string& vocab_chars,
                     const OptState& opt, int64_t iter, double best_val_loss, double best_score,
                     int64_t best_score_iter, uint64_t seed) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw TensorError("checkpoint: cannot open for writing: " + path);
  put_bytes(os, kMagic, sizeof(kMagic));
  put<uint32_t>(os, kVersion);

  const ModelConfig& c = model.config();
  put<int64_t>(os, c.n_embd);
  put<int64_t>(os, c.n_layer);
  put<int64_t>(os, c.n_head);
  put<int64_t>(os, c.mlp_expansion);
  put<int64_t>(os, c.block_size);
  put<int64_t>(os, c.vocab_size);
  put<double>(os, c.dropout);
  put<uint8_t>(os, c.use_bias ? 1 : 0);
  put<uint8_t>(os, c.tie_output_head ? 1 : 0);
  put_string(os, vocab_chars);

  const auto& params = model.params();
  const auto& names = model.param_names();
  put<uint64_t>(os, params.size());
  for (size_t i = 0; i < params.size(); ++i) {
    put_string(os, names[i]);
    const Shape& s = params[i].shape();
    put<uint64_t>(os, s.size());
    for (int64_t d : s) put<int64_t>(os, d);
    put_floats(os, params[i].data());
  }

  put<uint8_t>(os, opt.m.empty() ? 0 : 1);
  if (!opt.m.empty()) {
    put<int64_t>(os, opt.step);
    for (size_t i = 0; i < params.size(); ++i) {
      put_floats(os, opt.m[i]);
      put_floats(os, opt.v[i]);
    }
  }

  put<int64_t>(os, iter);
  put<double>(os, best_val_loss);
  put<double>(os, best_score);
  put<int64_t>(os, best_score_iter);
  put<uint64_t>(os, seed);
  if (!os) throw TensorError("checkpoint: write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw TensorError("checkpoint: cannot open: " + path);
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw TensorError("checkpoint: bad magic in " + path);
  const uint32_t version = get<uint32_t>(is);
  if (version != kVersion)
    throw TensorError("checkpoint: unsupported version " + std::to_string(version));

  Checkpoint ck;
  ck.config.n_embd = get<int64_t>(is);
  ck.config.n_layer = get<int64_t>(is);
  ck.config.n_head = get<int64_t>(is);
  ck.config.mlp_expansion = get<int64_t>(is);
  ck.config.block_size = get<int64_t>(is);
  ck.config.vocab_size = get<int64_t>(is);
  ck.config.dropout = get<double>(is);
  ck.config.use_bias = get<uint8_t>(is) != 0;
  ck.config.tie_output_head = get<uint8_t>(is) != 0;
  ck.vocab_chars = get_string(is);

  // Rebuild the graph structure, then overwrite every parameter in
  // enumeration order with the stored values.
  ck.model = Model(ck.config, Rng(0));
  auto& params = ck.model.params();
  const uint64_t count = get<uint64_t>(is);
  if (count != params.size())
    throw TensorError("checkpoint: parameter count mismatch in " + path);
  for (size_t i = 0; i < count; ++i) {
    const std::string name = get_string(is);
    if (name != ck.model.param_names()[i])
      throw TensorError("checkpoint: parameter order mismatch: " + name);
    const uint64_t ndim = get<uint64_t>(is);
    Shape shape(ndim);
    for (auto& d : shape) d = get<int64_t>(is);
    if (shape != params[i].shape())
      throw TensorError("checkpoint: shape mismatch for " + name);
    auto values = get_floats(is);
    if (values.size() != params[i].data().size())
      throw TensorError("checkpoint: size mismatch for " + name);
    params[i].data().assign(values.begin(), values.end());
  }

  if (get<uint8_t>(is) != 0) {
    ck.opt.step = get<int64_t>(is);
    for (size_t i = 0; i < count; ++i) {
      ck.opt.m.push_back(get_floats(is));
      ck.opt.v.push_back(get_floats(is));
    }
  }

  ck.iter = get<int64_t>(is);
  ck.best_val_loss = get<double>(is);
  ck.best_score = get<double>(is);
  ck.best_score_iter = get<int64_t>(is);
  ck.seed = get<uint64_t>(is);
  return ck;
}

}  // namespace capmem
