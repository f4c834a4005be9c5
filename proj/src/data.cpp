#include "usm/data.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "usm/random.hpp"

namespace usm {

namespace fs = std::filesystem;

std::vector<ManifestEntry> read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open manifest " + path.string());
  const fs::path base = path.parent_path();
  std::vector<ManifestEntry> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> cols;
    std::stringstream ss(line);
    for (std::string c; std::getline(ss, c, '\t');) cols.push_back(c);
    if (cols.size() != 4)
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": expected 4 tab-separated fields");
    ManifestEntry e;
    e.audio = fs::path(cols[0]).is_absolute() ? fs::path(cols[0]) : base / cols[0];
    e.duration = std::stod(cols[1]);
    if (cols[2] != "-") e.transcript = cols[2];
    e.language = cols[3];
    out.push_back(std::move(e));
  }
  return out;
}

void write_manifest(const fs::path& path, const std::vector<ManifestEntry>& entries) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write manifest " + path.string());
  const fs::path base = fs::absolute(path).parent_path().lexically_normal();
  for (const auto& e : entries) {
    fs::path audio = fs::absolute(e.audio).lexically_normal();
    fs::path rel = audio.lexically_relative(base);
    if (!rel.empty() && *rel.begin() != "..") audio = rel;
    out << audio.string() << '\t' << std::fixed << std::setprecision(6) << e.duration << '\t'
        << (e.transcript ? *e.transcript : "-") << '\t' << e.language << '\n';
  }
}

Matrix featurize(const AudioClip& clip) {
  FeatureSequence f = log_mel(clip.sample_rate == 16000 ? clip : resample(clip, 16000));
  normalize_utterance(f.frames);
  return std::move(f.frames);
}

Utterance load_utterance(const ManifestEntry& entry) {
  AudioClip clip = read_wav(entry.audio);
  Utterance u;
  u.id = entry.audio.filename().string();
  u.features = featurize(clip);
  u.labeled = entry.transcript.has_value();
  if (entry.transcript) u.transcript = *entry.transcript;
  u.language = entry.language;
  u.duration = clip.duration();
  return u;
}

std::vector<Utterance> load_utterances(const std::vector<ManifestEntry>& entries) {
  std::vector<Utterance> out;
  out.reserve(entries.size());
  for (const auto& e : entries) out.push_back(load_utterance(e));
  return out;
}

LabelSequence to_labels(const TokenVocab& vocab, const std::string& transcript) {
  return LabelSequence{vocab.encode(transcript)};
}

std::vector<std::size_t> batch_indices(std::size_t dataset_size, std::size_t batch_size,
                                       std::size_t step, std::uint64_t seed) {
  if (dataset_size == 0) throw std::invalid_argument("batch_indices: empty dataset");
  std::vector<std::size_t> out;
  std::size_t cached_epoch = static_cast<std::size_t>(-1);
  std::vector<std::size_t> perm(dataset_size);
  for (std::size_t i = 0; i < batch_size; ++i) {
    const std::size_t pos = step * batch_size + i;
    const std::size_t epoch = pos / dataset_size;
    if (epoch != cached_epoch) {
      std::iota(perm.begin(), perm.end(), 0);
      Rng rng(derive_seed(seed, {0x45504f4348, epoch}));
      std::shuffle(perm.begin(), perm.end(), rng.engine());
      cached_epoch = epoch;
    }
    out.push_back(perm[pos % dataset_size]);
  }
  return out;
}

}  // namespace usm
