#include "usm/adapters.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

#include "usm/checkpoint.hpp"
#include "usm/most.hpp"
#include "usm/ops.hpp"
#include "usm/optimizer.hpp"
#include "usm/random.hpp"

namespace usm {

Adapter::Adapter(std::size_t dim, std::size_t bottleneck, Rng& rng)
    : norm(dim), down(dim, bottleneck, rng), up(bottleneck, dim, rng, /*zero_init=*/true) {
  if (bottleneck == 0 || bottleneck > dim)
    throw std::invalid_argument("adapter bottleneck " + std::to_string(bottleneck) +
                                " must be in [1, model_dim=" + std::to_string(dim) + "]");
}

Tensor Adapter::forward(const Tensor& x) const {
  return up.forward(ops::swish(down.forward(norm.forward(x))));
}

void Adapter::collect(NamedParams& out, const std::string& prefix) const {
  norm.collect(out, prefix + ".norm");
  down.collect(out, prefix + ".down");
  up.collect(out, prefix + ".up");
}

void AdapterWeights::collect(NamedParams& out, const std::string& prefix) const {
  ff1.collect(out, prefix + ".ff1");
  ff2.collect(out, prefix + ".ff2");
}

std::size_t adapter_param_count(std::size_t dim, std::size_t bottleneck) {
  return 2 * dim + (dim * bottleneck + bottleneck) + (bottleneck * dim + dim);
}

std::size_t solve_bottleneck(std::size_t dim, std::size_t num_layers, std::size_t base_params,
                             double target_ratio) {
  std::size_t best = 1;
  double best_gap = std::numeric_limits<double>::infinity();
  for (std::size_t b = 1; b <= dim; ++b) {
    const double ratio = static_cast<double>(2 * num_layers * adapter_param_count(dim, b)) /
                         static_cast<double>(base_params);
    const double gap = std::abs(ratio - target_ratio);
    if (gap < best_gap) {
      best_gap = gap;
      best = b;
    }
  }
  return best;
}

Tensor AdapterView::encode(const Tensor& features, const AttentionPattern& pattern) const {
  return base_->encode(features, pattern, adapters_);
}

Tensor AdapterView::log_probs(const Tensor& features, const AttentionPattern& pattern) const {
  return base_->ctc_log_probs(encode(features, pattern));
}

AdaptedModel::AdaptedModel(std::shared_ptr<const AsrModel> base, const AdapterConfig& config)
    : base_(std::move(base)) {
  if (!base_) throw std::invalid_argument("AdaptedModel: null base model");
  const auto& enc = base_->config().encoder;
  bottleneck_ = config.bottleneck_dim;
  if (bottleneck_ == 0)
    bottleneck_ = solve_bottleneck(enc.model_dim, enc.num_layers,
                                   count_params(base_->inference_parameters()), config.target_ratio);
  if (bottleneck_ > enc.model_dim)
    throw std::invalid_argument("adapter bottleneck " + std::to_string(bottleneck_) +
                                " exceeds model_dim " + std::to_string(enc.model_dim));
  set_trainable(base_->parameters(), false);
}

void AdaptedModel::add_language(const std::string& tag, std::uint64_t seed) {
  if (tag.empty() || tag.find_first_of(" \t/") != std::string::npos)
    throw std::invalid_argument("adapter language tag '" + tag + "' is not a plain name");
  if (has_language(tag)) throw std::invalid_argument("adapter language '" + tag + "' already registered");
  const auto& enc = base_->config().encoder;
  Rng rng(derive_seed(seed, {0x414450}));
  std::vector<AdapterWeights> layers;
  for (std::size_t l = 0; l < enc.num_layers; ++l)
    layers.push_back({Adapter(enc.model_dim, bottleneck_, rng), Adapter(enc.model_dim, bottleneck_, rng)});
  sets_.emplace(tag, std::move(layers));
}

std::vector<std::string> AdaptedModel::languages() const {
  std::vector<std::string> out;
  for (const auto& [tag, s] : sets_) out.push_back(tag);
  return out;
}

const std::vector<AdapterWeights>& AdaptedModel::set(const std::string& tag) const {
  auto it = sets_.find(tag);
  if (it == sets_.end()) {
    std::string known;
    for (const auto& [t, s] : sets_) known += (known.empty() ? "" : ", ") + t;
    throw std::out_of_range("no adapters for language '" + tag + "'; registered: [" + known + "]");
  }
  return it->second;
}

AdapterView AdaptedModel::select(const std::string& tag) const {
  auto it = sets_.find(tag);
  return AdapterView(base_.get(), &set(tag), &it->first);
}

NamedParams AdaptedModel::adapter_parameters(const std::string& tag) const {
  NamedParams out;
  const auto& layers = set(tag);
  for (std::size_t l = 0; l < layers.size(); ++l) layers[l].collect(out, "layers." + std::to_string(l));
  return out;
}

AdapterReport AdaptedModel::report() const {
  const auto& enc = base_->config().encoder;
  AdapterReport r;
  r.base_params = count_params(base_->inference_parameters());
  r.bottleneck = bottleneck_;
  r.adapter_params = 2 * enc.num_layers * adapter_param_count(enc.model_dim, bottleneck_);
  return r;
}

double adapter_train_step(const AdaptedModel& model, const std::vector<PairedUtterance>& batch,
                          const std::string& language, Optimizer& optimizer,
                          const AttentionPattern& pattern) {
  AdapterView view = model.select(language);
  AsrBatchLoss loss = asr_batch_loss(model.base(), batch, pattern, &view.adapters());
  const double value = loss.loss.item();
  if (!std::isfinite(value)) {
    optimizer.zero_grad();
    return value;  // no update; the caller decides how to stop
  }
  loss.loss.backward();
  optimizer.step();
  return value;
}

void save_adapters(const std::filesystem::path& dir, const AdaptedModel& model) {
  std::filesystem::create_directories(dir);
  for (const auto& tag : model.languages()) {
    Checkpoint ckpt;
    ckpt.meta["language"] = tag;
    ckpt.meta["bottleneck"] = std::to_string(model.bottleneck());
    ckpt.meta["base_fingerprint"] = model.base().config().fingerprint();
    ckpt.put_params(model.adapter_parameters(tag));
    save_checkpoint(dir / tag, ckpt);
  }
}

void load_adapters(const std::filesystem::path& dir, AdaptedModel& model) {
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (!entry.is_directory() || !std::filesystem::exists(entry.path() / "manifest.txt")) continue;
    Checkpoint ckpt = load_checkpoint(entry.path());
    const std::string& tag = ckpt.meta_at("language");
    if (ckpt.meta_at("base_fingerprint") != model.base().config().fingerprint())
      throw std::runtime_error("adapters for '" + tag + "' were trained on a different base model");
    if (std::stoul(ckpt.meta_at("bottleneck")) != model.bottleneck())
      throw std::runtime_error("adapters for '" + tag + "' use bottleneck " + ckpt.meta_at("bottleneck"));
    if (!model.has_language(tag)) model.add_language(tag, 0);
    for (auto& [name, t] : model.adapter_parameters(tag)) {
      const auto& rec = ckpt.at(name);
      if (rec.shape != t.shape()) throw ShapeError("adapter array '" + name + "' shape mismatch");
      std::copy(rec.values.begin(), rec.values.end(), t.mutable_values().begin());
    }
  }
}

}  // namespace usm
