#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "eegc/model.hpp"

namespace eegc {

namespace {

constexpr char kMagic[8] = {'E', 'E', 'G', 'C', 'K', 'P', 'T', '1'};

std::uint32_t to_le(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    v = ((v & 0xFFu) << 24) | ((v & 0xFF00u) << 8) | ((v >> 8) & 0xFF00u) | (v >> 24);
  }
  return v;
}

void write_u32(std::ostream& out, std::uint32_t v) {
  v = to_le(v);
  out.write(reinterpret_cast<const char*>(&v), 4);
}

std::uint32_t read_u32(std::istream& in) {
  std::uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), 4);
  if (!in) throw std::runtime_error("checkpoint truncated");
  return to_le(v);
}

}  // namespace

void round_to_float(Weights& w) {
  for (auto& [name, t] : w.tensors()) {
    for (Eigen::Index i = 0; i < t->size(); ++i) {
      t->data()[i] = static_cast<double>(static_cast<float>(t->data()[i]));
    }
  }
}

void save_checkpoint(const std::string& path, const Weights& w,
                     const nlohmann::json& meta) {
  nlohmann::json header;
  header["config"] = w.cfg;
  header["meta"] = meta;
  nlohmann::json table = nlohmann::json::array();
  for (const auto& [name, t] : w.tensors()) {
    table.push_back({{"name", name}, {"rows", t->rows()}, {"cols", t->cols()}});
  }
  header["tensors"] = table;
  nlohmann::json rope = nlohmann::json::array();
  for (const auto& L : w.layers) rope.push_back(L.rope_inv_freq);
  header["rope_inv_freq"] = rope;
  const std::string hs = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out.write(kMagic, sizeof kMagic);
  write_u32(out, static_cast<std::uint32_t>(hs.size()));
  out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  for (const auto& [name, t] : w.tensors()) {
    for (Eigen::Index i = 0; i < t->size(); ++i) {
      const float f = static_cast<float>(t->data()[i]);
      std::uint32_t bits = 0;
      std::memcpy(&bits, &f, 4);
      write_u32(out, bits);
    }
  }
  if (!out) throw std::runtime_error("write failed: " + path);

  std::ofstream side(path + ".json");
  if (!side) throw std::runtime_error("cannot write " + path + ".json");
  nlohmann::json sj = w.cfg;
  side << sj.dump(2) << "\n";
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kMagic, 8) != 0) {
    throw std::runtime_error("not a checkpoint: " + path);
  }
  const auto hlen = read_u32(in);
  std::string hs(hlen, '\0');
  in.read(hs.data(), hlen);
  if (!in) throw std::runtime_error("checkpoint truncated");
  const auto header = nlohmann::json::parse(hs);

  Checkpoint ck;
  const ModelConfig cfg = header.at("config").get<ModelConfig>();
  ck.weights = Weights::zeros(cfg);
  ck.meta = header.value("meta", nlohmann::json::object());

  const auto& rope = header.at("rope_inv_freq");
  if (rope.size() != ck.weights.layers.size()) {
    throw std::runtime_error("checkpoint rope table does not match layer count");
  }
  for (std::size_t l = 0; l < rope.size(); ++l) {
    auto f = rope[l].get<std::vector<double>>();
    if (static_cast<int>(f.size()) * 2 != cfg.head_dim) {
      throw std::runtime_error("checkpoint rope table does not match head_dim");
    }
    ck.weights.layers[l].rope_inv_freq = std::move(f);
  }

  const auto& table = header.at("tensors");
  auto tensors = ck.weights.tensors();
  if (table.size() != tensors.size()) {
    throw std::runtime_error("checkpoint tensor count mismatch");
  }
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    auto& [name, t] = tensors[i];
    const auto& e = table[i];
    if (e.at("name").get<std::string>() != name ||
        e.at("rows").get<Eigen::Index>() != t->rows() ||
        e.at("cols").get<Eigen::Index>() != t->cols()) {
      throw std::runtime_error("checkpoint tensor table mismatch at " + name);
    }
    for (Eigen::Index k = 0; k < t->size(); ++k) {
      const std::uint32_t bits = read_u32(in);
      float f = 0.0f;
      std::memcpy(&f, &bits, 4);
      t->data()[k] = f;
    }
  }
  if (!ck.weights.all_finite()) throw std::runtime_error("checkpoint has non-finite values");
  return ck;
}

}  // namespace eegc
