// SPDX-FileCopyrightText: Copyright (c) 2026 The tokentune authors.
// SPDX-License-Identifier: Apache-2.0

#include "tokentune/data.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>

#include <nlohmann/json.hpp>

namespace tokentune {

std::vector<Index> ByteTokenizer::encode(std::string_view bytes) {
  std::vector<Index> ids(bytes.size());
  std::transform(bytes.begin(), bytes.end(), ids.begin(),
                 [](char c) { return static_cast<Index>(static_cast<unsigned char>(c)); });
  return ids;
}

std::string ByteTokenizer::decode(std::span<const Index> ids) {
  std::string out(ids.size(), '\0');
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= kPad) {
      throw RangeError("ByteTokenizer::decode: id " + std::to_string(ids[i]) + " is not a byte");
    }
    out[i] = static_cast<char>(static_cast<unsigned char>(ids[i]));
  }
  return out;
}

Index ClassificationSpec::markers_per_sequence(Index length) const {
  return std::max<Index>(1, length / 8);
}

void ClassificationSpec::validate() const {
  if (n_examples < 1) throw ConfigError("task.n_examples", "must be >= 1");
  if (seq_len < 2) throw ConfigError("task.seq_len", "must be >= 2");
  if (min_len != 0 && (min_len < 2 || min_len > seq_len)) {
    throw ConfigError("task.min_len", "must be 0 or lie in [2, seq_len]");
  }
  if (n_classes < 2) throw ConfigError("task.n_classes", "must be >= 2");
  if (vocab_size < kFirstMarker + n_classes + 1) {
    throw ConfigError("task.vocab_size", "too small for CLS, PAD, markers and one filler token");
  }
  if (!(difficulty >= 0.0 && difficulty <= 1.0)) {
    throw ConfigError("task.difficulty", "must lie in [0, 1]");
  }
}

Dataset gen_classification(const ClassificationSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  const Index first_filler = ClassificationSpec::kFirstMarker + spec.n_classes;
  std::uniform_int_distribution<Index> label_dist(0, spec.n_classes - 1);
  std::uniform_int_distribution<Index> filler_dist(first_filler, spec.vocab_size - 1);
  std::uniform_int_distribution<Index> other_dist(0, spec.n_classes - 2);
  const Index lo = spec.min_len == 0 ? spec.seq_len : spec.min_len;
  std::uniform_int_distribution<Index> len_dist(lo, spec.seq_len);

  Dataset data;
  data.reserve(static_cast<std::size_t>(spec.n_examples));
  std::vector<Index> slots;
  for (Index e = 0; e < spec.n_examples; ++e) {
    const Index label = label_dist(rng);
    const Index length = len_dist(rng);
    std::vector<Index> ids(static_cast<std::size_t>(spec.seq_len), ClassificationSpec::kPad);
    ids[0] = ClassificationSpec::kCls;
    for (Index i = 1; i < length; ++i) ids[static_cast<std::size_t>(i)] = filler_dist(rng);

    const Index m = std::min(spec.markers_per_sequence(length), length - 1);
    // Distractors stay below half of the markers so the label keeps a strict majority.
    const auto distractors = static_cast<Index>(spec.difficulty * static_cast<double>(m - 1) / 2.0);
    slots.resize(static_cast<std::size_t>(length - 1));
    std::iota(slots.begin(), slots.end(), Index{1});
    for (Index j = 0; j < m; ++j) {
      std::uniform_int_distribution<Index> pick(j, length - 2);
      std::swap(slots[static_cast<std::size_t>(j)], slots[static_cast<std::size_t>(pick(rng))]);
    }
    for (Index j = 0; j < m; ++j) {
      Index cls = label;
      if (j < distractors) {
        cls = other_dist(rng);
        if (cls >= label) ++cls;
      }
      ids[static_cast<std::size_t>(slots[static_cast<std::size_t>(j)])] =
          ClassificationSpec::kFirstMarker + cls;
    }

    Example ex;
    ex.seq = TokenSequence::from_ids(std::move(ids));
    for (Index i = length; i < spec.seq_len; ++i) ex.seq.pad_mask[static_cast<std::size_t>(i)] = 0;
    ex.label = label;
    ex.serial = static_cast<std::uint64_t>(e);
    data.push_back(std::move(ex));
  }
  return data;
}

Index majority_marker(const TokenSequence& seq, const ClassificationSpec& spec) {
  std::vector<Index> counts(static_cast<std::size_t>(spec.n_classes), 0);
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (!seq.pad_mask[i]) continue;
    const Index c = seq.token_ids[i] - ClassificationSpec::kFirstMarker;
    if (c >= 0 && c < spec.n_classes) ++counts[static_cast<std::size_t>(c)];
  }
  return static_cast<Index>(std::max_element(counts.begin(), counts.end()) - counts.begin());
}

Dataset lm_windows(std::string_view bytes, Index seq_len, Index stride) {
  if (seq_len < 2) throw ConfigError("task.seq_len", "must be >= 2");
  if (stride < 1) throw ConfigError("task.stride", "must be >= 1");
  if (bytes.empty()) throw IoError("LM corpus is empty");
  const auto length = static_cast<Index>(bytes.size());
  Dataset data;
  for (Index start = 0; start + seq_len <= length; start += stride) {
    Example ex;
    ex.seq = TokenSequence::from_ids(
        ByteTokenizer::encode(bytes.substr(static_cast<std::size_t>(start),
                                           static_cast<std::size_t>(seq_len))));
    ex.targets.assign(static_cast<std::size_t>(seq_len), -1);
    for (Index i = 0; i + 1 < seq_len; ++i) {
      ex.targets[static_cast<std::size_t>(i)] = ex.seq.token_ids[static_cast<std::size_t>(i + 1)];
    }
    ex.serial = data.size();
    data.push_back(std::move(ex));
  }
  if (data.empty()) throw IoError("LM corpus is shorter than one window");
  return data;
}

Dataset load_lm_corpus(const std::filesystem::path& path, Index seq_len, Index stride) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open LM corpus '" + path.string() + "'");
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.empty()) throw IoError("LM corpus '" + path.string() + "' is empty");
  return lm_windows(bytes, seq_len, stride);
}

std::string generate_text_corpus(std::size_t bytes, std::uint64_t seed) {
  static constexpr std::array<const char*, 24> kNouns{
      "river", "engine", "garden", "letter", "window", "market", "teacher", "signal",
      "harbor", "forest", "machine", "village", "story",  "bridge", "lantern", "orchard",
      "captain", "painter", "road",  "winter", "kitchen", "number", "mountain", "student"};
  static constexpr std::array<const char*, 16> kVerbs{
      "carries", "follows", "watches", "builds", "finds",   "opens",  "keeps",  "remembers",
      "moves",   "answers", "crosses", "counts", "repairs", "covers", "visits", "greets"};
  static constexpr std::array<const char*, 12> kAdjectives{
      "quiet", "old", "bright", "narrow", "heavy", "small", "green", "distant", "warm", "plain",
      "careful", "early"};
  static constexpr std::array<const char*, 8> kLinks{"and", "but", "while", "because",
                                                     "so",  "then", "after", "before"};
  std::mt19937_64 rng(seed);
  auto pick = [&rng](const auto& list) {
    std::uniform_int_distribution<std::size_t> d(0, list.size() - 1);
    return std::string(list[d(rng)]);
  };
  std::bernoulli_distribution coin(0.5);
  auto noun_phrase = [&] {
    std::string s = coin(rng) ? "the " : "a ";
    if (coin(rng)) s += pick(kAdjectives) + " ";
    return s + pick(kNouns);
  };
  auto clause = [&] { return noun_phrase() + " " + pick(kVerbs) + " " + noun_phrase(); };

  std::string out;
  out.reserve(bytes + 256);
  while (out.size() < bytes) {
    std::string sentence = clause();
    if (coin(rng)) sentence += " " + pick(kLinks) + " " + clause();
    sentence[0] = static_cast<char>(sentence[0] - 'a' + 'A');
    out += sentence;
    out += std::uniform_int_distribution<int>(0, 5)(rng) == 0 ? ".\n" : ". ";
  }
  out.resize(bytes);
  return out;
}

void dump_classification_jsonl(const std::filesystem::path& path, const Dataset& data) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  for (const auto& ex : data) {
    std::vector<Index> ids;
    for (std::size_t i = 0; i < ex.seq.size(); ++i) {
      if (ex.seq.pad_mask[i]) ids.push_back(ex.seq.token_ids[i]);
    }
    out << nlohmann::json{{"ids", ids}, {"label", ex.label}}.dump() << '\n';
  }
  if (!out) throw IoError("write to '" + path.string() + "' failed");
}

}  // namespace tokentune
