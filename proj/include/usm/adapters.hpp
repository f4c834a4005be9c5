// Residual adapters for adapting a frozen encoder per language.

#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "usm/encoder.hpp"
#include "usm/layers.hpp"
#include "usm/model.hpp"

namespace usm {

// layer-norm -> down -> swish -> up, with `up` zero-initialized so an
// untrained adapter contributes exactly zero.
struct Adapter {
  LayerNorm norm;
  Linear down;
  Linear up;

  Adapter() = default;
  Adapter(std::size_t dim, std::size_t bottleneck, Rng& rng);
  Tensor forward(const Tensor& x) const;
  void collect(NamedParams& out, const std::string& prefix) const;
};

// The two adapters of one conformer block, parallel to its half
// feed-forward sublayers.
struct AdapterWeights {
  Adapter ff1;
  Adapter ff2;

  void collect(NamedParams& out, const std::string& prefix) const;
};

struct AdapterConfig {
  std::size_t bottleneck_dim = 0;  // 0 = solve from target_ratio
  double target_ratio = 0.023;
};

std::size_t adapter_param_count(std::size_t dim, std::size_t bottleneck);

// Bottleneck whose total added parameters (two adapters per layer) best
// approach target_ratio * base_params.
std::size_t solve_bottleneck(std::size_t dim, std::size_t num_layers, std::size_t base_params,
                             double target_ratio);

struct AdapterReport {
  std::size_t base_params = 0;
  std::size_t adapter_params = 0;  // per language
  std::size_t bottleneck = 0;
  double ratio() const {
    return static_cast<double>(adapter_params) / static_cast<double>(base_params);
  }
};

class AdaptedModel;

// A base model bound to one language's adapters. Cheap to copy: holds
// pointers only.
class AdapterView {
 public:
  Tensor encode(const Tensor& features, const AttentionPattern& pattern) const;
  Tensor log_probs(const Tensor& features, const AttentionPattern& pattern) const;
  const std::string& language() const { return *language_; }
  const std::vector<AdapterWeights>& adapters() const { return *adapters_; }

 private:
  friend class AdaptedModel;
  AdapterView(const AsrModel* base, const std::vector<AdapterWeights>* adapters,
              const std::string* language)
      : base_(base), adapters_(adapters), language_(language) {}
  const AsrModel* base_;
  const std::vector<AdapterWeights>* adapters_;
  const std::string* language_;
};

// A frozen base model plus one adapter set per language tag. Attaching
// marks every base parameter as not trainable.
class AdaptedModel {
 public:
  AdaptedModel(std::shared_ptr<const AsrModel> base, const AdapterConfig& config);

  // Adds a zero-initialized adapter set. Throws if the tag exists.
  void add_language(const std::string& tag, std::uint64_t seed);
  bool has_language(const std::string& tag) const { return sets_.count(tag) != 0; }
  std::vector<std::string> languages() const;

  // Throws std::out_of_range listing registered tags.
  AdapterView select(const std::string& tag) const;

  const AsrModel& base() const { return *base_; }
  std::size_t bottleneck() const { return bottleneck_; }
  NamedParams adapter_parameters(const std::string& tag) const;
  AdapterReport report() const;

 private:
  const std::vector<AdapterWeights>& set(const std::string& tag) const;
  std::shared_ptr<const AsrModel> base_;
  std::size_t bottleneck_ = 0;
  std::map<std::string, std::vector<AdapterWeights>> sets_;
};

// Convenience for select().
inline AdapterView select_adapter(const AdaptedModel& model, const std::string& language) {
  return model.select(language);
}

struct PairedUtterance;
class Optimizer;

// CTC loss of the selected language's view on `batch`, backward, and one
// optimizer update. The optimizer should hold that language's adapter
// parameters only. Returns the batch loss before the update; a non-finite
// loss is returned without updating anything.
double adapter_train_step(const AdaptedModel& model, const std::vector<PairedUtterance>& batch,
                          const std::string& language, Optimizer& optimizer,
                          const AttentionPattern& pattern);

// One checkpoint directory per language under dir/<tag>.
void save_adapters(const std::filesystem::path& dir, const AdaptedModel& model);
// Registers (or overwrites) every language found under dir.
void load_adapters(const std::filesystem::path& dir, AdaptedModel& model);

}  // namespace usm
