// Checkpoint directory: manifest.txt (text) + arrays.bin (little-endian f64).
//
// manifest.txt:
//   usm-checkpoint 1
//   meta <key> <value to end of line>
//   array <name> <d0,d1,...> <byte offset> <count> <fnv64 hex>
//
// Saving writes into a sibling temporary directory and renames it into
// place, so an interrupted save never clobbers the previous checkpoint.

#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "usm/bestrq.hpp"
#include "usm/layers.hpp"
#include "usm/matrix.hpp"
#include "usm/model.hpp"
#include "usm/tensor.hpp"

namespace usm {

struct ArrayRecord {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

class Checkpoint {
 public:
  std::map<std::string, std::string> meta;

  void put(const std::string& name, Shape shape, std::vector<double> values);
  void put(const std::string& name, const Tensor& t) {
    put(name, t.shape(), {t.values().begin(), t.values().end()});
  }
  void put_params(const NamedParams& params, const std::string& prefix = "");

  const ArrayRecord* find(const std::string& name) const;
  const ArrayRecord& at(const std::string& name) const;
  const std::vector<ArrayRecord>& arrays() const { return arrays_; }

  // Arrays whose names start with prefix, prefix stripped, as new tensors.
  NamedParams params(const std::string& prefix = "") const;

  std::string meta_or(const std::string& key, const std::string& fallback) const;
  const std::string& meta_at(const std::string& key) const;

 private:
  std::vector<ArrayRecord> arrays_;
  std::map<std::string, std::size_t> index_;
};

void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ckpt);
// Verifies every array checksum; throws on mismatch or truncation.
Checkpoint load_checkpoint(const std::filesystem::path& dir);

// Model config round trip through checkpoint metadata.
void store_model_config(Checkpoint& ckpt, const ModelConfig& cfg);
ModelConfig load_model_config(const Checkpoint& ckpt);

// Parameters under "model.", config and fingerprint.
void store_model(Checkpoint& ckpt, const AsrModel& model);
AsrModel restore_model(const Checkpoint& ckpt);

void store_quantizer(Checkpoint& ckpt, const RandomQuantizer& q);
std::optional<RandomQuantizer> restore_quantizer(const Checkpoint& ckpt);

}  // namespace usm
