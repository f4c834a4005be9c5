#include "usm/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace usm {

namespace fs = std::filesystem;

namespace {

std::string join_shape(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out;
}

Shape parse_shape(const std::string& text) {
  Shape out;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) out.push_back(std::stoul(part));
  return out;
}

void write_le(std::ostream& os, const std::vector<double>& values) {
  static_assert(sizeof(double) == 8);
  std::vector<unsigned char> buf(values.size() * 8);
  for (std::size_t i = 0; i < values.size(); ++i) {
    auto bits = std::bit_cast<std::uint64_t>(values[i]);
    for (int b = 0; b < 8; ++b) buf[i * 8 + b] = static_cast<unsigned char>(bits >> (8 * b));
  }
  os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

std::vector<double> read_le(const std::vector<unsigned char>& blob, std::size_t offset, std::size_t count) {
  if (offset + count * 8 > blob.size()) throw std::runtime_error("checkpoint: array blob truncated");
  std::vector<double> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(blob[offset + i * 8 + b]) << (8 * b);
    out[i] = std::bit_cast<double>(bits);
  }
  return out;
}

std::string hex(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << v;
  return os.str();
}

}  // namespace

void Checkpoint::put(const std::string& name, Shape shape, std::vector<double> values) {
  if (name.empty() || name.find_first_of(" \t\n") != std::string::npos)
    throw std::invalid_argument("checkpoint: bad array name '" + name + "'");
  if (shape_numel(shape) != values.size())
    throw ShapeError("checkpoint: " + name + " shape " + shape_str(shape) + " holds " +
                     std::to_string(values.size()) + " values");
  auto it = index_.find(name);
  if (it != index_.end()) {
    arrays_[it->second] = {name, std::move(shape), std::move(values)};
    return;
  }
  index_[name] = arrays_.size();
  arrays_.push_back({name, std::move(shape), std::move(values)});
}

void Checkpoint::put_params(const NamedParams& params, const std::string& prefix) {
  for (const auto& [name, t] : params) put(prefix + name, t);
}

const ArrayRecord* Checkpoint::find(const std::string& name) const {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : &arrays_[it->second];
}

const ArrayRecord& Checkpoint::at(const std::string& name) const {
  const ArrayRecord* r = find(name);
  if (!r) throw std::runtime_error("checkpoint: missing array '" + name + "'");
  return *r;
}

NamedParams Checkpoint::params(const std::string& prefix) const {
  NamedParams out;
  for (const auto& a : arrays_)
    if (a.name.rfind(prefix, 0) == 0)
      out.emplace_back(a.name.substr(prefix.size()), Tensor::from(a.shape, a.values));
  return out;
}

std::string Checkpoint::meta_or(const std::string& key, const std::string& fallback) const {
  auto it = meta.find(key);
  return it == meta.end() ? fallback : it->second;
}

const std::string& Checkpoint::meta_at(const std::string& key) const {
  auto it = meta.find(key);
  if (it == meta.end()) throw std::runtime_error("checkpoint: missing metadata '" + key + "'");
  return it->second;
}

void save_checkpoint(const fs::path& dir, const Checkpoint& ckpt) {
  const fs::path tmp = dir.string() + ".tmp";
  fs::remove_all(tmp);
  fs::create_directories(tmp);
  {
    std::ofstream manifest(tmp / "manifest.txt");
    std::ofstream blob(tmp / "arrays.bin", std::ios::binary);
    if (!manifest || !blob) throw std::runtime_error("checkpoint: cannot write " + tmp.string());
    manifest << "usm-checkpoint 1\n";
    for (const auto& [k, v] : ckpt.meta) {
      if (k.find_first_of(" \t\n") != std::string::npos || v.find('\n') != std::string::npos)
        throw std::invalid_argument("checkpoint: bad metadata key/value '" + k + "'");
      manifest << "meta " << k << " " << v << "\n";
    }
    std::size_t offset = 0;
    for (const auto& a : ckpt.arrays()) {
      manifest << "array " << a.name << " " << join_shape(a.shape) << " " << offset << " "
               << a.values.size() << " " << hex(checksum(a.values)) << "\n";
      write_le(blob, a.values);
      offset += a.values.size() * 8;
    }
    if (!manifest || !blob) throw std::runtime_error("checkpoint: write failed in " + tmp.string());
  }
  fs::remove_all(dir);
  fs::rename(tmp, dir);
}

Checkpoint load_checkpoint(const fs::path& dir) {
  std::ifstream manifest(dir / "manifest.txt");
  if (!manifest) throw std::runtime_error("checkpoint: cannot open " + (dir / "manifest.txt").string());
  std::ifstream blob_in(dir / "arrays.bin", std::ios::binary);
  if (!blob_in) throw std::runtime_error("checkpoint: cannot open " + (dir / "arrays.bin").string());
  std::vector<unsigned char> blob((std::istreambuf_iterator<char>(blob_in)), std::istreambuf_iterator<char>());

  std::string line;
  std::getline(manifest, line);
  if (line != "usm-checkpoint 1") throw std::runtime_error("checkpoint: unknown header '" + line + "'");
  Checkpoint ckpt;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string kind;
    ls >> kind;
    if (kind == "meta") {
      std::string key;
      ls >> key;
      std::string value;
      std::getline(ls, value);
      if (!value.empty() && value[0] == ' ') value.erase(0, 1);
      ckpt.meta[key] = value;
    } else if (kind == "array") {
      std::string name, shape, sum;
      std::size_t offset = 0, count = 0;
      ls >> name >> shape >> offset >> count >> sum;
      if (!ls) throw std::runtime_error("checkpoint: malformed line '" + line + "'");
      auto values = read_le(blob, offset, count);
      if (hex(checksum(values)) != sum)
        throw std::runtime_error("checkpoint: checksum mismatch for '" + name + "'");
      ckpt.put(name, parse_shape(shape), std::move(values));
    } else {
      throw std::runtime_error("checkpoint: malformed line '" + line + "'");
    }
  }
  return ckpt;
}

void store_model_config(Checkpoint& ckpt, const ModelConfig& cfg) {
  const auto& e = cfg.encoder;
  auto& m = ckpt.meta;
  m["model.layers"] = std::to_string(e.num_layers);
  m["model.dim"] = std::to_string(e.model_dim);
  m["model.heads"] = std::to_string(e.attention_heads);
  m["model.conv_kernel"] = std::to_string(e.conv_kernel_size);
  m["model.subsampling"] = std::to_string(e.subsampling_factor);
  m["model.input_dim"] = std::to_string(e.input_dim);
  m["model.ff_multiplier"] = std::to_string(e.ff_multiplier);
  m["model.relative_attention"] = e.relative_attention ? "1" : "0";
  m["model.rel_pos_cap"] = std::to_string(e.rel_pos_cap);
  m["model.use_convolution"] = e.use_convolution ? "1" : "0";
  m["model.graphemes"] = "[" + cfg.graphemes + "]";
  m["model.num_codebooks"] = std::to_string(cfg.num_codebooks);
  m["model.codebook_size"] = std::to_string(cfg.codebook_size);
  m["model.codebook_dim"] = std::to_string(cfg.codebook_dim);
  m["model.text_upsample"] = std::to_string(cfg.text_upsample);
  m["model.speech_layer"] = cfg.speech_layer ? "1" : "0";
  m["model.text_encoder"] = cfg.text_encoder ? "1" : "0";
  m["fingerprint"] = cfg.fingerprint();
}

ModelConfig load_model_config(const Checkpoint& ckpt) {
  auto num = [&](const std::string& k) { return std::stoul(ckpt.meta_at(k)); };
  ModelConfig cfg;
  auto& e = cfg.encoder;
  e.num_layers = num("model.layers");
  e.model_dim = num("model.dim");
  e.attention_heads = num("model.heads");
  e.conv_kernel_size = num("model.conv_kernel");
  e.subsampling_factor = num("model.subsampling");
  e.input_dim = num("model.input_dim");
  e.ff_multiplier = num("model.ff_multiplier");
  e.relative_attention = num("model.relative_attention") != 0;
  e.rel_pos_cap = num("model.rel_pos_cap");
  e.use_convolution = num("model.use_convolution") != 0;
  const std::string& g = ckpt.meta_at("model.graphemes");
  if (g.size() < 2 || g.front() != '[' || g.back() != ']')
    throw std::runtime_error("checkpoint: malformed grapheme list");
  cfg.graphemes = g.substr(1, g.size() - 2);
  cfg.num_codebooks = num("model.num_codebooks");
  cfg.codebook_size = num("model.codebook_size");
  cfg.codebook_dim = num("model.codebook_dim");
  cfg.text_upsample = num("model.text_upsample");
  cfg.speech_layer = num("model.speech_layer") != 0;
  cfg.text_encoder = num("model.text_encoder") != 0;
  if (auto fp = ckpt.meta.find("fingerprint"); fp != ckpt.meta.end() && fp->second != cfg.fingerprint())
    throw std::runtime_error("checkpoint: fingerprint does not match stored model config");
  return cfg;
}

void store_model(Checkpoint& ckpt, const AsrModel& model) {
  store_model_config(ckpt, model.config());
  ckpt.put_params(model.parameters(), "model.");
}

AsrModel restore_model(const Checkpoint& ckpt) {
  AsrModel model(load_model_config(ckpt), 0);
  NamedParams stored = ckpt.params("model.");
  auto copied = model.load_values(stored);
  if (copied.size() != model.parameters().size())
    throw std::runtime_error("checkpoint: " + std::to_string(model.parameters().size() - copied.size()) +
                             " model arrays missing");
  return model;
}

void store_quantizer(Checkpoint& ckpt, const RandomQuantizer& q) {
  ckpt.put("quantizer.projection", {q.projection().rows, q.projection().cols}, q.projection().data);
  ckpt.put("quantizer.codebooks", {q.codebooks().rows, q.codebooks().cols}, q.codebooks().data);
  ckpt.meta["quantizer.num_codebooks"] = std::to_string(q.num_codebooks());
}

std::optional<RandomQuantizer> restore_quantizer(const Checkpoint& ckpt) {
  const ArrayRecord* p = ckpt.find("quantizer.projection");
  const ArrayRecord* c = ckpt.find("quantizer.codebooks");
  if (!p || !c) return std::nullopt;
  Matrix proj(p->shape[0], p->shape[1]);
  proj.data = p->values;
  Matrix books(c->shape[0], c->shape[1]);
  books.data = c->values;
  return RandomQuantizer(std::move(proj), std::move(books),
                         std::stoul(ckpt.meta_at("quantizer.num_codebooks")));
}

}  // namespace usm
