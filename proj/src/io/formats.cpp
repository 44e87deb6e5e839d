// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "spell/io.hpp"

namespace spell {

std::string format_number(double value) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), value);
  return std::string(buf, res.ptr);
}

std::optional<double> parse_number(std::string_view text) {
  if (text.empty()) return std::nullopt;
  if (text.front() == '+') text.remove_prefix(1);
  double value = 0.0;
  const auto res = std::from_chars(text.data(), text.data() + text.size(), value);
  if (res.ec != std::errc() || res.ptr != text.data() + text.size()) {
    return std::nullopt;
  }
  return value;
}

namespace {

class LineReader {
 public:
  explicit LineReader(const fs::path& path) : path_(path), in_(path) {
    if (!in_) fail(ErrorKind::kIo, "cannot open " + path.string());
  }

  bool next(std::string& line) {
    if (!std::getline(in_, line)) return false;
    ++line_no_;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    return true;
  }

  std::size_t line_no() const noexcept { return line_no_; }

  [[noreturn]] void error(const std::string& field,
                          const std::string& what) const {
    fail(ErrorKind::kFormat, path_.string() + ":" + std::to_string(line_no_) +
                                 ": field '" + field + "': " + what);
  }

  void expect_header(const char* header) {
    std::string line;
    if (!next(line)) {
      fail(ErrorKind::kFormat, path_.string() + ": empty file, expected header '" +
                                   header + "'");
    }
    if (!line.empty() && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
    if (line != header) {
      fail(ErrorKind::kFormat, path_.string() + ":1: header mismatch, expected '" +
                                   std::string(header) + "', got '" + line + "'");
    }
  }

 private:
  fs::path path_;
  std::ifstream in_;
  std::size_t line_no_ = 0;
};

std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    if (comma == std::string_view::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
}

double field_number(const LineReader& r, std::string_view text,
                    const char* name) {
  const auto v = parse_number(text);
  if (!v || !std::isfinite(*v)) {
    r.error(name, "expected a finite number, got '" + std::string(text) + "'");
  }
  return *v;
}

std::string field_id(const LineReader& r, std::string_view text,
                     const char* name) {
  if (text.empty()) r.error(name, "must not be empty");
  if (text.find('"') != std::string_view::npos) {
    r.error(name, "quoted fields are not supported");
  }
  return std::string(text);
}

void check_id_writable(const std::string& id, const char* what) {
  if (id.empty() || id.find_first_of(",\"\n\r") != std::string::npos) {
    fail(ErrorKind::kValidation, std::string(what) + " '" + id +
                                     "' cannot be written to CSV (empty or "
                                     "contains a separator)");
  }
}

std::ofstream open_out(const fs::path& path, bool binary = false) {
  std::ofstream out(path, binary ? std::ios::binary | std::ios::trunc
                                 : std::ios::trunc);
  if (!out) fail(ErrorKind::kIo, "cannot write " + path.string());
  return out;
}

void finish(std::ofstream& out, const fs::path& path) {
  out.flush();
  if (!out) fail(ErrorKind::kIo, "failed writing " + path.string());
}

}  // namespace

// ---------------------------------------------------------------------------

std::vector<FaceBox> read_tracks(const fs::path& path) {
  LineReader r(path);
  r.expect_header(kTrackHeader);
  std::vector<FaceBox> boxes;
  std::set<FeatureKey> seen;
  std::string line;
  while (r.next(line)) {
    if (line.empty()) continue;
    const auto f = split_fields(line);
    if (f.size() != 8) {
      r.error("row", "expected 8 fields, got " + std::to_string(f.size()));
    }
    FaceBox b;
    b.video_id = field_id(r, f[0], "video_id");
    b.time = field_number(r, f[1], "time");
    b.box.cx = field_number(r, f[2], "cx");
    b.box.cy = field_number(r, f[3], "cy");
    b.box.w = field_number(r, f[4], "w");
    b.box.h = field_number(r, f[5], "h");
    b.entity_id = field_id(r, f[6], "entity_id");
    if (!f[7].empty()) {
      if (f[7] == "0") {
        b.label = 0;
      } else if (f[7] == "1") {
        b.label = 1;
      } else {
        r.error("label", "expected 0, 1 or empty, got '" + std::string(f[7]) + "'");
      }
    }
    try {
      validate(b);
    } catch (const Error& e) {
      r.error("row", e.what());
    }
    if (!seen.insert(key_of(b)).second) {
      r.error("row", "duplicate key " + describe(key_of(b)));
    }
    boxes.push_back(std::move(b));
  }
  return boxes;
}

void write_tracks(const fs::path& path, const std::vector<FaceBox>& boxes) {
  std::ofstream out = open_out(path);
  out << kTrackHeader << '\n';
  for (const FaceBox& b : boxes) {
    check_id_writable(b.video_id, "video_id");
    check_id_writable(b.entity_id, "entity_id");
    out << b.video_id << ',' << format_number(b.time) << ','
        << format_number(b.box.cx) << ',' << format_number(b.box.cy) << ','
        << format_number(b.box.w) << ',' << format_number(b.box.h) << ','
        << b.entity_id << ',';
    if (b.label) out << *b.label;
    out << '\n';
  }
  finish(out, path);
}

// ---------------------------------------------------------------------------

FeatureKey key_of(const FaceBox& box) {
  return {box.video_id, std::llround(box.time * 1e6), box.entity_id};
}

std::string describe(const FeatureKey& key) {
  return "(" + key.video_id + ", " +
         format_number(static_cast<double>(key.time_us) * 1e-6) + ", " +
         key.entity_id + ")";
}

fs::path index_path_for(const fs::path& features_path) {
  fs::path p = features_path;
  p += ".index.csv";
  return p;
}

namespace {

constexpr std::size_t kFeatureMagicLength = sizeof(kFeatureMagic) - 1;

std::uint32_t read_u32(std::istream& in, const fs::path& path,
                       std::size_t offset, const char* field) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (in.gcount() != 4) {
    fail(ErrorKind::kFormat, path.string() + ": truncated at offset " +
                                 std::to_string(offset) + " reading " + field);
  }
  return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) |
         (std::uint32_t(b[2]) << 16) | (std::uint32_t(b[3]) << 24);
}

void write_u32(std::ostream& out, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                     static_cast<char>((v >> 16) & 0xff),
                     static_cast<char>((v >> 24) & 0xff)};
  out.write(b, 4);
}

}  // namespace

FeatureStore read_feature_store(const fs::path& features_path) {
  std::ifstream in(features_path, std::ios::binary);
  if (!in) fail(ErrorKind::kIo, "cannot open " + features_path.string());
  char magic[kFeatureMagicLength];
  in.read(magic, kFeatureMagicLength);
  if (in.gcount() != static_cast<std::streamsize>(kFeatureMagicLength) ||
      std::memcmp(magic, kFeatureMagic, kFeatureMagicLength) != 0) {
    fail(ErrorKind::kFormat,
         features_path.string() + ": offset 0: bad magic, not a feature store");
  }
  const std::uint32_t n = read_u32(in, features_path, kFeatureMagicLength, "count");
  const std::uint32_t d =
      read_u32(in, features_path, kFeatureMagicLength + 4, "width");
  const std::uintmax_t header = kFeatureMagicLength + 8;
  const std::uintmax_t expected = header + std::uintmax_t(n) * d * 4;
  const std::uintmax_t actual = fs::file_size(features_path);
  if (actual != expected) {
    fail(ErrorKind::kFormat, features_path.string() + ": length " +
                                 std::to_string(actual) + " bytes, header (" +
                                 std::to_string(n) + " x " + std::to_string(d) +
                                 ") implies " + std::to_string(expected));
  }
  FeatureStore store;
  store.features = Matrix<float>(n, d);
  std::vector<unsigned char> raw(std::size_t(n) * d * 4);
  in.read(reinterpret_cast<char*>(raw.data()),
          static_cast<std::streamsize>(raw.size()));
  auto dst = store.features.data();
  for (std::size_t i = 0; i < dst.size(); ++i) {
    const unsigned char* b = raw.data() + 4 * i;
    const std::uint32_t bits = std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) |
                               (std::uint32_t(b[2]) << 16) |
                               (std::uint32_t(b[3]) << 24);
    dst[i] = std::bit_cast<float>(bits);
    if (!std::isfinite(dst[i])) {
      fail(ErrorKind::kFormat,
           features_path.string() + ": offset " +
               std::to_string(header + 4 * i) + ": non-finite feature (row " +
               std::to_string(i / d) + ", column " + std::to_string(i % d) + ")");
    }
  }

  const fs::path idx = index_path_for(features_path);
  LineReader r(idx);
  r.expect_header(kIndexHeader);
  std::string line;
  std::set<FeatureKey> seen;
  while (r.next(line)) {
    if (line.empty()) continue;
    const auto f = split_fields(line);
    if (f.size() != 4) {
      r.error("row", "expected 4 fields, got " + std::to_string(f.size()));
    }
    IndexEntry e;
    e.video_id = field_id(r, f[0], "video_id");
    e.time = field_number(r, f[1], "time");
    e.entity_id = field_id(r, f[2], "entity_id");
    std::uint64_t row = 0;
    const auto res = std::from_chars(f[3].data(), f[3].data() + f[3].size(), row);
    if (res.ec != std::errc() || res.ptr != f[3].data() + f[3].size()) {
      r.error("row", "expected a row number, got '" + std::string(f[3]) + "'");
    }
    if (row >= n) {
      r.error("row", "row " + std::to_string(row) + " >= record count " +
                         std::to_string(n));
    }
    e.row = static_cast<std::uint32_t>(row);
    FaceBox probe;
    probe.video_id = e.video_id;
    probe.time = e.time;
    probe.entity_id = e.entity_id;
    if (!seen.insert(key_of(probe)).second) {
      r.error("row", "duplicate key " + describe(key_of(probe)));
    }
    store.index.push_back(std::move(e));
  }
  return store;
}

void write_feature_store(const fs::path& features_path,
                         const FeatureStore& store) {
  std::ofstream out = open_out(features_path, true);
  out.write(kFeatureMagic, kFeatureMagicLength);
  write_u32(out, static_cast<std::uint32_t>(store.features.rows()));
  write_u32(out, static_cast<std::uint32_t>(store.features.cols()));
  std::vector<char> raw(store.features.size() * 4);
  const auto src = store.features.data();
  for (std::size_t i = 0; i < src.size(); ++i) {
    const std::uint32_t bits = std::bit_cast<std::uint32_t>(src[i]);
    raw[4 * i] = static_cast<char>(bits & 0xff);
    raw[4 * i + 1] = static_cast<char>((bits >> 8) & 0xff);
    raw[4 * i + 2] = static_cast<char>((bits >> 16) & 0xff);
    raw[4 * i + 3] = static_cast<char>((bits >> 24) & 0xff);
  }
  out.write(raw.data(), static_cast<std::streamsize>(raw.size()));
  finish(out, features_path);

  const fs::path idx = index_path_for(features_path);
  std::ofstream index = open_out(idx);
  index << kIndexHeader << '\n';
  for (const IndexEntry& e : store.index) {
    check_id_writable(e.video_id, "video_id");
    check_id_writable(e.entity_id, "entity_id");
    index << e.video_id << ',' << format_number(e.time) << ',' << e.entity_id
          << ',' << e.row << '\n';
  }
  finish(index, idx);
}

// ---------------------------------------------------------------------------

bool Dataset::labeled() const noexcept {
  return !boxes.empty() && std::all_of(boxes.begin(), boxes.end(),
                                       [](const FaceBox& b) { return b.label.has_value(); });
}

Dataset load_dataset(const fs::path& tracks_path, const fs::path& features_path) {
  Dataset ds;
  ds.boxes = read_tracks(tracks_path);
  FeatureStore store = read_feature_store(features_path);
  if (store.features.cols() != kFeatureWidth) {
    fail(ErrorKind::kFormat, features_path.string() + ": feature width " +
                                 std::to_string(store.features.cols()) +
                                 ", expected " + std::to_string(kFeatureWidth));
  }
  std::map<FeatureKey, std::uint32_t> rows;
  for (const IndexEntry& e : store.index) {
    FaceBox probe;
    probe.video_id = e.video_id;
    probe.time = e.time;
    probe.entity_id = e.entity_id;
    rows.emplace(key_of(probe), e.row);
  }
  for (FaceBox& b : ds.boxes) {
    auto it = rows.find(key_of(b));
    if (it == rows.end()) {
      fail(ErrorKind::kValidation, "track row " + describe(key_of(b)) + " in " +
                                       tracks_path.string() +
                                       " has no feature record in " +
                                       index_path_for(features_path).string());
    }
    b.feature_index = it->second;
  }
  ds.features = std::move(store.features);
  return ds;
}

Dataset load_tracks_only(const fs::path& tracks_path) {
  Dataset ds;
  ds.boxes = read_tracks(tracks_path);
  return ds;
}

// ---------------------------------------------------------------------------

void write_predictions(const fs::path& path,
                       const std::vector<PredictionRow>& rows) {
  std::ofstream out = open_out(path);
  out << kPredictionHeader << '\n';
  for (const PredictionRow& p : rows) {
    check_id_writable(p.video_id, "video_id");
    check_id_writable(p.entity_id, "entity_id");
    out << p.video_id << ',' << format_number(p.time) << ',' << p.entity_id
        << ',' << format_number(p.score) << '\n';
  }
  finish(out, path);
}

std::vector<PredictionRow> read_predictions(const fs::path& path) {
  LineReader r(path);
  r.expect_header(kPredictionHeader);
  std::vector<PredictionRow> rows;
  std::string line;
  while (r.next(line)) {
    if (line.empty()) continue;
    const auto f = split_fields(line);
    if (f.size() != 4) {
      r.error("row", "expected 4 fields, got " + std::to_string(f.size()));
    }
    PredictionRow p;
    p.video_id = field_id(r, f[0], "video_id");
    p.time = field_number(r, f[1], "time");
    p.entity_id = field_id(r, f[2], "entity_id");
    p.score = field_number(r, f[3], "score");
    rows.push_back(std::move(p));
  }
  return rows;
}

// ---------------------------------------------------------------------------

std::vector<KeyValue> read_key_values(const fs::path& path) {
  LineReader r(path);
  std::vector<KeyValue> out;
  std::set<std::string> keys;
  std::string line;
  const auto trim = [](std::string_view s) {
    const auto b = s.find_first_not_of(" \t");
    if (b == std::string_view::npos) return std::string_view{};
    const auto e = s.find_last_not_of(" \t");
    return s.substr(b, e - b + 1);
  };
  while (r.next(line)) {
    std::string_view content = line;
    if (const auto hash = content.find('#'); hash != std::string_view::npos) {
      content = content.substr(0, hash);
    }
    content = trim(content);
    if (content.empty()) continue;
    const auto eq = content.find('=');
    if (eq == std::string_view::npos) {
      r.error("line", "expected 'key = value'");
    }
    KeyValue kv{std::string(trim(content.substr(0, eq))),
                std::string(trim(content.substr(eq + 1))), r.line_no()};
    if (kv.key.empty()) r.error("line", "empty key");
    if (!keys.insert(kv.key).second) r.error(kv.key, "duplicate key");
    out.push_back(std::move(kv));
  }
  return out;
}

namespace {

[[noreturn]] void kv_error(const KeyValue& kv, const std::string& what) {
  fail(ErrorKind::kValidation, "line " + std::to_string(kv.line) + ": key '" +
                                   kv.key + "': " + what + ", got '" + kv.value +
                                   "'");
}

}  // namespace

double kv_real(const KeyValue& kv) {
  const auto v = parse_number(kv.value);
  if (!v || !std::isfinite(*v)) kv_error(kv, "expected a number");
  return *v;
}

std::uint64_t kv_count(const KeyValue& kv) {
  std::uint64_t v = 0;
  const char* end = kv.value.data() + kv.value.size();
  const auto res = std::from_chars(kv.value.data(), end, v);
  if (kv.value.empty() || res.ec != std::errc() || res.ptr != end) {
    kv_error(kv, "expected a non-negative integer");
  }
  return v;
}

bool kv_flag(const KeyValue& kv) {
  if (kv.value == "true" || kv.value == "1" || kv.value == "yes") return true;
  if (kv.value == "false" || kv.value == "0" || kv.value == "no") return false;
  kv_error(kv, "expected true/false");
}

}  // namespace spell
