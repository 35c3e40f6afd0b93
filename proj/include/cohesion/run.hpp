#pragma once

// Prepared dataset directories and run bookkeeping: the on-disk layout shared
// by the command-line tool, file fingerprints and feature re-alignment.

#include <array>
#include <charconv>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cohesion/data_ingest.hpp"
#include "cohesion/error.hpp"

namespace cohesion {

// Layout of a prepared directory:
//   users.tsv, items.tsv      index<TAB>raw id, defining the dense index order
//   train.tsv, val.tsv, test.tsv   raw user<TAB>raw item
//   split_manifest.json, manifest.json
//   feat_<modality>.cmf       item features aligned with items.tsv
namespace prepared {

inline constexpr std::array<const char*, 5> kCoreFiles{"users.tsv", "items.tsv", "train.tsv", "val.tsv", "test.tsv"};

inline std::filesystem::path feature_path(const std::filesystem::path& dir, Modality m) {
  return dir / ("feat_" + std::string(to_string(m)) + ".cmf");
}

inline void write_ids(const std::filesystem::path& path, const IdMap& ids) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  for (Index i = 0; i < ids.size(); ++i) out << i << '\t' << ids.raw(i) << '\n';
}

inline IdMap read_ids(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  IdMap ids;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw ParseError(path.string() + ": expected index<TAB>id", lineno);
    const std::string raw = line.substr(tab + 1);
    if (ids.intern(raw) != ids.size() - 1 || std::to_string(ids.size() - 1) != line.substr(0, tab))
      throw ParseError(path.string() + ": indices must be 0,1,2,... without repeats", lineno);
  }
  return ids;
}

// Reads raw pairs and maps them through fixed id maps.
inline InteractionTable read_pairs(const std::filesystem::path& path, const IdMap& users, const IdMap& items) {
  const InteractionTable raw = load_interactions(path);
  InteractionTable t;
  t.users = users;
  t.items = items;
  for (const auto& p : raw.pairs) {
    const auto u = users.find(raw.users.raw(p.user));
    const auto i = items.find(raw.items.raw(p.item));
    if (!u || !i)
      throw DataError(path.string() + ": pair (" + raw.users.raw(p.user) + ", " + raw.items.raw(p.item) +
                      ") uses an id not listed in users.tsv/items.tsv");
    t.pairs.push_back({*u, *i});
  }
  return t;
}

inline void write(const std::filesystem::path& dir, const DatasetSplit& split) {
  std::filesystem::create_directories(dir);
  write_ids(dir / "users.tsv", split.train.users);
  write_ids(dir / "items.tsv", split.train.items);
  write_interactions(dir / "train.tsv", split.train);
  write_interactions(dir / "val.tsv", split.val);
  write_interactions(dir / "test.tsv", split.test);
  std::ofstream(dir / "split_manifest.json", std::ios::trunc) << split_manifest(split).dump(2) << '\n';
}

struct Data {
  DatasetSplit split;
  std::vector<FeatureMatrix> features;  // textual then visual, whichever exist
};

inline Data load(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw Error("not a prepared directory: " + dir.string());
  const IdMap users = read_ids(dir / "users.tsv");
  const IdMap items = read_ids(dir / "items.tsv");
  Data d;
  d.split.train = read_pairs(dir / "train.tsv", users, items);
  d.split.val = read_pairs(dir / "val.tsv", users, items);
  d.split.test = read_pairs(dir / "test.tsv", users, items);
  std::ifstream sm(dir / "split_manifest.json");
  if (sm) {
    const auto j = nlohmann::json::parse(sm);
    d.split.seed = j.value("seed", std::uint64_t{0});
  }
  for (Modality m : {Modality::textual, Modality::visual}) {
    const auto path = feature_path(dir, m);
    if (std::filesystem::exists(path)) d.features.push_back(load_features(path, items.size(), m));
  }
  return d;
}

}  // namespace prepared

// Re-orders feature rows so row i belongs to item index i. Source rows are
// addressed by the item's raw id read as a non-negative integer.
inline FeatureMatrix align_features(const Matrix& source, const IdMap& items, Modality m) {
  FeatureMatrix out{m, Matrix(items.size(), source.cols())};
  for (Index i = 0; i < items.size(); ++i) {
    const std::string& raw = items.raw(i);
    std::size_t row = 0;
    const auto [end, ec] = std::from_chars(raw.data(), raw.data() + raw.size(), row);
    if (ec != std::errc{} || end != raw.data() + raw.size())
      throw DataError("feature alignment needs integer item ids, got '" + raw + "'");
    if (row >= source.rows())
      throw AlignmentError("item id " + raw + " has no feature row (file has " + std::to_string(source.rows()) +
                           " rows)");
    std::copy(source.row(row).begin(), source.row(row).end(), out.values.row(i).begin());
  }
  return out;
}

// 64-bit FNV-1a over the file bytes.
inline std::uint64_t fnv1a_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::uint64_t h = 0xcbf29ce484222325ULL;
  std::array<char, 1 << 16> buf;
  while (in) {
    in.read(buf.data(), buf.size());
    for (std::streamsize k = 0; k < in.gcount(); ++k) {
      h ^= static_cast<unsigned char>(buf[static_cast<std::size_t>(k)]);
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

inline nlohmann::json file_fingerprint(const std::filesystem::path& path) {
  char hex[17];
  std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(fnv1a_file(path)));
  return {{"size", std::filesystem::file_size(path)}, {"fnv1a64", hex}};
}

// Fingerprints of every file a training run reads from a prepared directory.
inline nlohmann::json dataset_fingerprint(const std::filesystem::path& dir) {
  nlohmann::json j = nlohmann::json::object();
  for (const char* name : prepared::kCoreFiles) j[name] = file_fingerprint(dir / name);
  for (Modality m : {Modality::textual, Modality::visual}) {
    const auto path = prepared::feature_path(dir, m);
    if (std::filesystem::exists(path)) j[path.filename().string()] = file_fingerprint(path);
  }
  return j;
}

inline std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// `git describe` of the working directory, or empty when unavailable.
inline std::string git_describe() {
  std::FILE* p = popen("git describe --always --dirty 2>/dev/null", "r");
  if (!p) return {};
  std::string out;
  char buf[128];
  while (std::fgets(buf, sizeof buf, p)) out += buf;
  pclose(p);
  while (!out.empty() && (out.back() == '\n' || out.back() == '\r')) out.pop_back();
  return out;
}

}  // namespace cohesion
