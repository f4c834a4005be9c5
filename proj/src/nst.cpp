#include "usm/nst.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "usm/random.hpp"
#include "usm/scoring.hpp"
#include "usm/training.hpp"

namespace usm {

namespace fs = std::filesystem;

double words_per_second(const std::string& hypothesis, double duration) {
  if (!(duration > 0.0)) throw std::invalid_argument("words_per_second: duration must be positive");
  return static_cast<double>(split_words(hypothesis).size()) / duration;
}

PseudoLabelRun pseudo_label(const AsrModel& teacher, const AttentionPattern& pattern,
                            const std::vector<ManifestEntry>& unlabeled) {
  PseudoLabelRun run;
  for (const auto& entry : unlabeled) {
    Utterance u;
    try {
      u = load_utterance(entry);
      if (u.features.rows < teacher.config().encoder.subsampling_factor)
        throw std::runtime_error("clip shorter than one encoder frame");
    } catch (const std::exception& e) {
      run.skipped.push_back(entry.audio.string() + ": " + e.what());
      continue;
    }
    PseudoLabeledItem item;
    item.audio = entry.audio;
    item.language = entry.language;
    item.duration = u.duration;
    item.hypothesis = transcribe(teacher, u.features, pattern);
    item.words_per_second = words_per_second(item.hypothesis, item.duration);
    run.items.push_back(std::move(item));
  }
  return run;
}

std::vector<PseudoLabeledItem> filter_pseudo(const std::vector<PseudoLabeledItem>& items, double min_wps,
                                             double max_wps) {
  if (!(min_wps < max_wps)) throw std::invalid_argument("filter_pseudo: min_wps must be < max_wps");
  std::vector<PseudoLabeledItem> out;
  for (const auto& item : items) {
    if (split_words(item.hypothesis).empty()) continue;
    if (item.words_per_second < min_wps || item.words_per_second > max_wps) continue;
    out.push_back(item);
    out.back().kept = true;
  }
  return out;
}

void write_pseudo_manifest(const fs::path& path, const std::vector<PseudoLabeledItem>& items) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  char buf[64];
  for (const auto& it : items) {
    out << it.audio.string() << '\t';
    std::snprintf(buf, sizeof buf, "%.6f", it.duration);
    out << buf << '\t' << (it.hypothesis.empty() ? "-" : it.hypothesis) << '\t';
    std::snprintf(buf, sizeof buf, "%.6f", it.words_per_second);
    out << buf << '\t' << (it.kept ? 1 : 0) << '\t' << it.language << '\n';
  }
}

std::vector<PseudoLabeledItem> read_pseudo_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<PseudoLabeledItem> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::stringstream ss(line);
    for (std::string c; std::getline(ss, c, '\t');) cols.push_back(c);
    if (cols.size() != 6) throw std::runtime_error(path.string() + ": malformed line '" + line + "'");
    PseudoLabeledItem it;
    it.audio = cols[0];
    it.duration = std::stod(cols[1]);
    it.hypothesis = cols[2] == "-" ? "" : cols[2];
    it.words_per_second = std::stod(cols[3]);
    it.kept = cols[4] == "1";
    it.language = cols[5];
    out.push_back(std::move(it));
  }
  return out;
}

MixedStream::MixedStream(std::size_t supervised_size, std::size_t pseudo_size, double supervised_ratio,
                         std::size_t batch_size, std::uint64_t seed)
    : sizes_{supervised_size, pseudo_size}, batch_size_(batch_size), seed_(seed) {
  if (!(supervised_ratio > 0.0 && supervised_ratio <= 1.0))
    throw std::invalid_argument("mixing ratio must be in (0, 1]");
  if (batch_size == 0) throw std::invalid_argument("mixing batch size must be positive");
  ratio_ppm_ = static_cast<std::uint64_t>(std::llround(supervised_ratio * 1e6));
  if (supervised_size == 0) throw std::invalid_argument("mixing: supervised source is empty");
  if (ratio_ppm_ < 1000000 && pseudo_size == 0) throw std::invalid_argument("mixing: pseudo source is empty");
}

std::size_t MixedStream::draw(int s) {
  if (positions_[s] == 0 || positions_[s] == sizes_[s]) {
    if (positions_[s] == sizes_[s]) ++epochs_[s];
    orders_[s].resize(sizes_[s]);
    std::iota(orders_[s].begin(), orders_[s].end(), 0);
    Rng rng(derive_seed(seed_, {static_cast<std::uint64_t>(s), epochs_[s]}));
    std::shuffle(orders_[s].begin(), orders_[s].end(), rng.engine());
    positions_[s] = 0;
  }
  return orders_[s][positions_[s]++];
}

std::vector<MixedItem> MixedStream::next_batch() {
  const std::uint64_t b = batches_++;
  const std::uint64_t B = batch_size_;
  const std::size_t supervised = static_cast<std::size_t>((b + 1) * B * ratio_ppm_ / 1000000 - b * B * ratio_ppm_ / 1000000);
  std::vector<MixedItem> out;
  for (std::size_t i = 0; i < supervised; ++i) out.push_back({Source::Supervised, draw(0)});
  for (std::size_t i = supervised; i < batch_size_; ++i) out.push_back({Source::Pseudo, draw(1)});
  return out;
}

}  // namespace usm
