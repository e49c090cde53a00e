#include "convoher2/ingest.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <regex>
#include <set>
#include <sstream>

#include "convoher2/error.hpp"
#include "convoher2/image_io.hpp"

namespace convoher2 {
namespace fs = std::filesystem;

namespace {

constexpr std::array<std::string_view, kNumScores> kScoreLabels{"0", "1+", "2+", "3+"};
constexpr std::string_view kManifestMagic = "#convoher2-manifest v1";

std::regex compile_pattern(std::string_view pattern) {
  try {
    std::regex re{std::string(pattern)};
    if (re.mark_count() != 1) {
      throw Error(ErrorCode::PreconditionViolation, "label pattern must have exactly one capture group");
    }
    return re;
  } catch (const std::regex_error& e) {
    throw Error(ErrorCode::PreconditionViolation, "invalid label pattern: " + std::string(e.what()));
  }
}

// The single match of `re` inside `filename`, or an error when there is none
// or more than one.
std::smatch unique_match(const std::string& filename, const std::regex& re) {
  auto it = std::sregex_iterator(filename.begin(), filename.end(), re);
  const auto end = std::sregex_iterator();
  if (it == end) throw Error(ErrorCode::NoLabelToken, "no label token in '" + filename + "'");
  std::smatch first = *it;
  if (++it != end) throw Error(ErrorCode::AmbiguousLabel, "label pattern matches more than once in '" + filename + "'");
  return first;
}

Her2Score parse_label_with(const std::string& filename, const std::regex& re) {
  const std::smatch m = unique_match(filename, re);
  const std::string token = m[1].str();
  for (int k = 0; k < kNumScores; ++k) {
    if (token == kScoreLabels[static_cast<std::size_t>(k)]) return Her2Score::from_index(k);
  }
  throw Error(ErrorCode::NoLabelToken, "token '" + token + "' in '" + filename + "' is not a HER2 score");
}

std::string sample_id_with(const std::string& filename, const std::regex& re) {
  const std::smatch m = unique_match(filename, re);
  std::string prefix = filename.substr(0, static_cast<std::size_t>(m.position(1)));
  while (!prefix.empty() && (prefix.back() == '_' || prefix.back() == '-' || prefix.back() == '.')) {
    prefix.pop_back();
  }
  if (prefix.empty()) prefix = fs::path(filename).stem().string();
  return prefix;
}

Split split_from_relative(const fs::path& relative) {
  for (const auto& part : relative.parent_path()) {
    const std::string name = part.string();
    if (name == "train") return Split::Train;
    if (name == "test") return Split::Test;
  }
  return Split::Unsplit;
}

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> fields;
  std::size_t start = 0;
  for (;;) {
    const std::size_t tab = line.find('\t', start);
    fields.push_back(line.substr(start, tab - start));
    if (tab == std::string::npos) break;
    start = tab + 1;
  }
  return fields;
}

int parse_positive(const std::string& text, const char* what) {
  std::size_t used = 0;
  int value = 0;
  try {
    value = std::stoi(text, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != text.size() || value <= 0) {
    throw Error(ErrorCode::TypeError, std::string("bad ") + what + " '" + text + "' in manifest");
  }
  return value;
}

}  // namespace

std::string_view to_string(StainModality modality) {
  return modality == StainModality::HE ? "HE" : "IHC";
}

StainModality parse_modality(std::string_view token) {
  if (token == "HE") return StainModality::HE;
  if (token == "IHC") return StainModality::IHC;
  throw Error(ErrorCode::TypeError, "modality must be HE or IHC, got '" + std::string(token) + "'");
}

Her2Score Her2Score::from_index(int index) {
  if (index < 0 || index >= kNumScores) {
    throw Error(ErrorCode::IndexOutOfRange, "HER2 score index " + std::to_string(index));
  }
  return Her2Score(index);
}

Her2Score Her2Score::from_label(std::string_view label) {
  for (int k = 0; k < kNumScores; ++k) {
    if (label == kScoreLabels[static_cast<std::size_t>(k)]) return Her2Score(k);
  }
  throw Error(ErrorCode::NoLabelToken, "not a HER2 score: '" + std::string(label) + "'");
}

std::string_view Her2Score::label() const noexcept { return kScoreLabels[static_cast<std::size_t>(index_)]; }

std::string_view to_string(Split split) {
  switch (split) {
    case Split::Train: return "train";
    case Split::Test: return "test";
    case Split::Unsplit: return "unsplit";
  }
  return "unsplit";
}

Split parse_split(std::string_view token) {
  if (token == "train") return Split::Train;
  if (token == "test") return Split::Test;
  if (token == "unsplit") return Split::Unsplit;
  throw Error(ErrorCode::TypeError, "split must be train, test or unsplit, got '" + std::string(token) + "'");
}

Her2Score parse_label(std::string_view filename, std::string_view pattern) {
  if (filename.empty()) throw Error(ErrorCode::PreconditionViolation, "empty filename");
  return parse_label_with(std::string(filename), compile_pattern(pattern));
}

std::string format_label(Her2Score score) { return std::string(score.label()); }

std::string derive_sample_id(std::string_view filename, std::string_view pattern) {
  return sample_id_with(std::string(filename), compile_pattern(pattern));
}

// ---------------------------------------------------------------------------
// DatasetManifest

DatasetManifest::DatasetManifest(StainModality modality, std::vector<ImageRecord> records, std::uint64_t seed,
                                 std::string pattern, std::size_t skipped)
    : modality_(modality), records_(std::move(records)), seed_(seed), pattern_(std::move(pattern)), skipped_(skipped) {
  std::sort(records_.begin(), records_.end(), [](const ImageRecord& a, const ImageRecord& b) {
    return a.path.generic_string() < b.path.generic_string();
  });
  std::set<std::string> ids;
  for (const auto& r : records_) {
    if (r.sample_id.empty()) throw Error(ErrorCode::PreconditionViolation, "empty sample id for " + r.path.string());
    if (r.modality != modality_) {
      throw Error(ErrorCode::PreconditionViolation, "record " + r.path.string() + " has the wrong modality");
    }
    if (!ids.insert(r.sample_id).second) {
      throw Error(ErrorCode::DuplicateSample, "sample id '" + r.sample_id + "' appears twice");
    }
    ++class_counts_[static_cast<std::size_t>(r.score.index())];
    switch (r.split) {
      case Split::Train: ++split_counts_.train; break;
      case Split::Test: ++split_counts_.test; break;
      case Split::Unsplit: ++split_counts_.unsplit; break;
    }
  }
}

std::vector<ImageRecord> DatasetManifest::records_in(Split split) const {
  std::vector<ImageRecord> out;
  std::copy_if(records_.begin(), records_.end(), std::back_inserter(out),
               [split](const ImageRecord& r) { return r.split == split; });
  return out;
}

void DatasetManifest::write(std::ostream& out) const {
  out << kManifestMagic << " modality=" << to_string(modality_) << " seed=" << seed_ << '\n';
  out << "#skipped=" << skipped_ << '\n';
  out << "#pattern=" << pattern_ << '\n';
  for (const auto& r : records_) {
    out << r.path.generic_string() << '\t' << r.sample_id << '\t' << to_string(r.modality) << '\t'
        << r.score.label() << '\t' << to_string(r.split) << '\t' << r.source_width_px << '\t'
        << r.source_height_px << '\n';
  }
}

std::string DatasetManifest::serialize() const {
  std::ostringstream out;
  write(out);
  return out.str();
}

void DatasetManifest::save(const fs::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::IoError, "cannot write manifest " + path.string());
  write(out);
  if (!out) throw Error(ErrorCode::IoError, "failed writing manifest " + path.string());
}

DatasetManifest DatasetManifest::read(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line.rfind(kManifestMagic, 0) != 0) {
    throw Error(ErrorCode::TypeError, "missing manifest header");
  }
  std::optional<StainModality> modality;
  std::uint64_t seed = 0;
  {
    std::istringstream header(line.substr(kManifestMagic.size()));
    std::string kv;
    while (header >> kv) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw Error(ErrorCode::TypeError, "bad header field '" + kv + "'");
      const std::string key = kv.substr(0, eq);
      const std::string value = kv.substr(eq + 1);
      if (key == "modality") {
        modality = parse_modality(value);
      } else if (key == "seed") {
        try {
          seed = std::stoull(value);
        } catch (const std::exception&) {
          throw Error(ErrorCode::TypeError, "bad seed '" + value + "'");
        }
      } else {
        throw Error(ErrorCode::UnknownKey, "manifest header key '" + key + "'");
      }
    }
  }
  if (!modality) throw Error(ErrorCode::TypeError, "manifest header lacks modality");

  std::size_t skipped = 0;
  std::string pattern(kDefaultLabelPattern);
  std::vector<ImageRecord> records;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line.front() == '#') {
      if (line.rfind("#skipped=", 0) == 0) {
        skipped = std::stoull(line.substr(9));
      } else if (line.rfind("#pattern=", 0) == 0) {
        pattern = line.substr(9);
      }
      continue;
    }
    const auto fields = split_tabs(line);
    if (fields.size() != 7) throw Error(ErrorCode::TypeError, "manifest record needs 7 fields: " + line);
    ImageRecord r;
    r.path = fs::path(fields[0]);
    r.sample_id = fields[1];
    r.modality = parse_modality(fields[2]);
    r.score = Her2Score::from_label(fields[3]);
    r.split = parse_split(fields[4]);
    r.source_width_px = parse_positive(fields[5], "width");
    r.source_height_px = parse_positive(fields[6], "height");
    records.push_back(std::move(r));
  }
  return DatasetManifest(*modality, std::move(records), seed, std::move(pattern), skipped);
}

DatasetManifest DatasetManifest::load(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot read manifest " + path.string());
  return read(in);
}

// ---------------------------------------------------------------------------
// Scanning and splitting

DatasetManifest scan_dataset(const fs::path& root_in, StainModality modality, std::string_view pattern) {
  std::error_code ec;
  if (!fs::is_directory(root_in, ec)) throw Error(ErrorCode::IoError, "not a directory: " + root_in.string());
  fs::path root = root_in.lexically_normal();
  if (fs::is_directory(root / std::string(to_string(modality)), ec)) root /= std::string(to_string(modality));

  const std::regex re = compile_pattern(pattern);
  std::vector<ImageRecord> records;
  std::size_t skipped = 0;

  fs::recursive_directory_iterator it(root, fs::directory_options::none, ec);
  if (ec) throw Error(ErrorCode::IoError, "cannot read " + root.string() + ": " + ec.message());
  for (const fs::recursive_directory_iterator end; it != end; it.increment(ec)) {
    if (ec) throw Error(ErrorCode::IoError, "error walking " + root.string() + ": " + ec.message());
    if (!it->is_regular_file(ec) || !has_image_extension(it->path())) continue;
    const std::string filename = it->path().filename().string();
    ImageRecord r;
    try {
      r.score = parse_label_with(filename, re);
      r.sample_id = sample_id_with(filename, re);
    } catch (const Error&) {
      ++skipped;
      continue;
    }
    const auto size = probe_image_size(it->path());
    if (!size) {
      ++skipped;
      continue;
    }
    r.path = it->path();
    r.modality = modality;
    r.split = split_from_relative(it->path().lexically_relative(root));
    r.source_width_px = size->width;
    r.source_height_px = size->height;
    records.push_back(std::move(r));
  }
  if (records.empty()) throw Error(ErrorCode::EmptyDataset, "no labelled images under " + root.string());
  return DatasetManifest(modality, std::move(records), 0, std::string(pattern), skipped);
}

std::array<std::size_t, kNumScores> stratified_allocation(const std::array<std::size_t, kNumScores>& sizes,
                                                          double train_fraction) {
  const std::size_t total = std::accumulate(sizes.begin(), sizes.end(), std::size_t{0});
  const auto target = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(total)));
  std::array<std::size_t, kNumScores> alloc{};
  std::array<double, kNumScores> remainder{};
  std::size_t assigned = 0;
  for (std::size_t k = 0; k < kNumScores; ++k) {
    const double exact = train_fraction * static_cast<double>(sizes[k]);
    alloc[k] = static_cast<std::size_t>(std::floor(exact));
    remainder[k] = exact - std::floor(exact);
    assigned += alloc[k];
  }
  std::array<std::size_t, kNumScores> order{0, 1, 2, 3};
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return remainder[a] > remainder[b]; });
  for (std::size_t k : order) {
    if (assigned >= target) break;
    if (alloc[k] < sizes[k] && remainder[k] > 0.0) {
      ++alloc[k];
      ++assigned;
    }
  }
  return alloc;
}

DatasetManifest split_manifest(const DatasetManifest& manifest, const SplitOptions& options) {
  if (!(options.train_fraction > 0.0 && options.train_fraction < 1.0)) {
    throw Error(ErrorCode::PreconditionViolation, "train fraction must lie strictly between 0 and 1");
  }
  if (manifest.size() == 0) throw Error(ErrorCode::EmptyDataset, "cannot split an empty manifest");
  if (!options.force && manifest.split_counts().unsplit != manifest.size()) {
    throw Error(ErrorCode::AlreadySplit, "manifest carries predefined splits; pass force to overwrite");
  }

  std::vector<ImageRecord> records = manifest.records();
  std::mt19937_64 rng(options.seed);
  auto shuffled = [&rng](std::vector<std::size_t> idx) {
    std::shuffle(idx.begin(), idx.end(), rng);
    return idx;
  };
  std::vector<bool> to_train(records.size(), false);

  if (options.stratified) {
    std::array<std::vector<std::size_t>, kNumScores> by_category;
    for (std::size_t i = 0; i < records.size(); ++i) {
      by_category[static_cast<std::size_t>(records[i].score.index())].push_back(i);
    }
    std::array<std::size_t, kNumScores> sizes{};
    for (std::size_t k = 0; k < kNumScores; ++k) sizes[k] = by_category[k].size();
    const auto alloc = stratified_allocation(sizes, options.train_fraction);
    for (std::size_t k = 0; k < kNumScores; ++k) {
      const auto idx = shuffled(by_category[k]);
      for (std::size_t j = 0; j < alloc[k]; ++j) to_train[idx[j]] = true;
    }
  } else {
    std::vector<std::size_t> all(records.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    const auto idx = shuffled(std::move(all));
    const auto n_train =
        static_cast<std::size_t>(std::llround(options.train_fraction * static_cast<double>(records.size())));
    for (std::size_t j = 0; j < n_train; ++j) to_train[idx[j]] = true;
  }

  for (std::size_t i = 0; i < records.size(); ++i) records[i].split = to_train[i] ? Split::Train : Split::Test;
  return DatasetManifest(manifest.modality(), std::move(records), options.seed, manifest.pattern(), manifest.skipped());
}

PairingReport verify_pairing(const DatasetManifest& he, const DatasetManifest& ihc) {
  std::map<std::string, Her2Score> he_scores;
  std::map<std::string, Her2Score> ihc_scores;
  for (const auto& r : he.records()) he_scores.emplace(r.sample_id, r.score);
  for (const auto& r : ihc.records()) ihc_scores.emplace(r.sample_id, r.score);

  PairingReport report;
  for (const auto& [id, score] : he_scores) {
    const auto other = ihc_scores.find(id);
    if (other == ihc_scores.end()) {
      report.only_in_he.push_back(id);
    } else if (other->second == score) {
      ++report.matched;
    } else {
      report.score_mismatches.push_back({id, score, other->second});
    }
  }
  for (const auto& [id, score] : ihc_scores) {
    if (!he_scores.contains(id)) report.only_in_ihc.push_back(id);
  }
  return report;
}

DistributionCheck check_distribution(const DatasetManifest& manifest,
                                     const std::array<std::size_t, kNumScores>& expected, std::size_t tolerance) {
  DistributionCheck check;
  check.observed = manifest.class_counts();
  check.expected = expected;
  check.tolerance = tolerance;
  for (std::size_t k = 0; k < kNumScores; ++k) {
    const auto a = check.observed[k];
    const auto b = expected[k];
    check.total_deviation += a > b ? a - b : b - a;
  }
  check.flagged = check.total_deviation > tolerance;
  return check;
}

}  // namespace convoher2
