#include "hashmesh/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>

#include "hashmesh/common.hpp"

namespace hashmesh {

namespace {

[[noreturn]] void parse_fail(const std::string& path, std::size_t line, const std::string& msg) {
  throw ConfigError(path + ":" + std::to_string(line) + ": " + msg);
}

std::string_view trim_cr(std::string_view s) {
  while (!s.empty() && (s.back() == '\r' || s.back() == '\n' || s.back() == ' ')) {
    s.remove_suffix(1);
  }
  return s;
}

template <typename T>
T parse_number(std::string_view token, const std::string& path, std::size_t line,
               const char* what) {
  T value{};
  const auto [ptr, ec] = std::from_chars(token.data(), token.data() + token.size(), value);
  if (ec != std::errc() || ptr != token.data() + token.size()) {
    parse_fail(path, line, std::string("invalid ") + what + " '" + std::string(token) + "'");
  }
  return value;
}

}  // namespace

DatasetHandle DatasetHandle::parse_xc(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open dataset file '" + path + "'");

  std::string line;
  if (!std::getline(in, line)) parse_fail(path, 1, "missing header line");
  std::size_t lineno = 1;
  DatasetHeader header;
  {
    const std::string_view h = trim_cr(line);
    std::uint64_t vals[3];
    std::size_t pos = 0;
    for (int i = 0; i < 3; ++i) {
      while (pos < h.size() && h[pos] == ' ') ++pos;
      std::size_t end = pos;
      while (end < h.size() && h[end] != ' ') ++end;
      if (pos == end) parse_fail(path, 1, "header must be 'num_points feature_dim label_dim'");
      vals[i] = parse_number<std::uint64_t>(h.substr(pos, end - pos), path, 1, "header field");
      pos = end;
    }
    while (pos < h.size() && h[pos] == ' ') ++pos;
    if (pos != h.size()) parse_fail(path, 1, "trailing tokens in header");
    header.num_points = vals[0];
    header.feature_dim = static_cast<std::uint32_t>(vals[1]);
    header.label_dim = static_cast<std::uint32_t>(vals[2]);
    if (header.num_points == 0 || vals[1] == 0 || vals[2] == 0 || vals[1] > UINT32_MAX ||
        vals[2] > UINT32_MAX) {
      parse_fail(path, 1, "header fields must be positive 32-bit values");
    }
  }

  std::vector<DataRecord> records;
  records.reserve(header.num_points);
  std::vector<std::pair<std::uint32_t, float>> pairs;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string_view l = trim_cr(line);
    if (l.empty()) continue;

    DataRecord rec;
    std::size_t space = l.find(' ');
    const std::string_view label_part = l.substr(0, space);
    if (label_part.empty()) parse_fail(path, lineno, "record has no labels");
    std::size_t p = 0;
    while (p <= label_part.size()) {
      const std::size_t comma = std::min(label_part.find(',', p), label_part.size());
      const auto tok = label_part.substr(p, comma - p);
      if (tok.empty()) parse_fail(path, lineno, "empty label token");
      const auto label = parse_number<std::uint32_t>(tok, path, lineno, "label");
      if (label >= header.label_dim) {
        parse_fail(path, lineno,
                   "label " + std::to_string(label) + " out of range (label_dim " +
                       std::to_string(header.label_dim) + ")");
      }
      rec.labels.push_back(label);
      p = comma + 1;
    }

    pairs.clear();
    std::size_t pos = (space == std::string_view::npos) ? l.size() : space + 1;
    while (pos < l.size()) {
      while (pos < l.size() && l[pos] == ' ') ++pos;
      if (pos >= l.size()) break;
      std::size_t end = l.find(' ', pos);
      if (end == std::string_view::npos) end = l.size();
      const std::string_view tok = l.substr(pos, end - pos);
      const std::size_t colon = tok.find(':');
      if (colon == std::string_view::npos) {
        parse_fail(path, lineno, "feature token '" + std::string(tok) + "' lacks ':'");
      }
      const auto idx = parse_number<std::uint32_t>(tok.substr(0, colon), path, lineno,
                                                   "feature index");
      if (idx >= header.feature_dim) {
        parse_fail(path, lineno,
                   "feature index " + std::to_string(idx) + " out of range (feature_dim " +
                       std::to_string(header.feature_dim) + ")");
      }
      const float val =
          parse_number<float>(tok.substr(colon + 1), path, lineno, "feature value");
      pairs.emplace_back(idx, val);
      pos = end + 1;
    }
    std::sort(pairs.begin(), pairs.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    for (std::size_t i = 1; i < pairs.size(); ++i) {
      if (pairs[i].first == pairs[i - 1].first) {
        parse_fail(path, lineno, "duplicate feature index " + std::to_string(pairs[i].first));
      }
    }
    rec.features.dim = header.feature_dim;
    rec.features.indices.reserve(pairs.size());
    rec.features.values.reserve(pairs.size());
    for (const auto& [idx, val] : pairs) {
      rec.features.indices.push_back(idx);
      rec.features.values.push_back(val);
    }
    records.push_back(std::move(rec));
  }

  if (records.size() != header.num_points) {
    throw ConfigError(path + ": header claims " + std::to_string(header.num_points) +
                      " records but the file holds " + std::to_string(records.size()));
  }
  DatasetHandle handle;
  handle.header_ = header;
  handle.records_ = std::move(records);
  handle.source_path_ = path;
  return handle;
}

void DatasetHandle::write_xc(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot open '" + path + "' for writing");
  out << header_.num_points << ' ' << header_.feature_dim << ' ' << header_.label_dim << '\n';
  char buf[64];
  for (const DataRecord& rec : records_) {
    for (std::size_t i = 0; i < rec.labels.size(); ++i) {
      if (i > 0) out << ',';
      out << rec.labels[i];
    }
    for (std::size_t i = 0; i < rec.features.indices.size(); ++i) {
      const auto [ptr, ec] =
          std::to_chars(buf, buf + sizeof(buf), rec.features.values[i]);
      (void)ec;
      out << ' ' << rec.features.indices[i] << ':' << std::string_view(buf, ptr - buf);
    }
    out << '\n';
  }
  if (!out) throw ConfigError("write to '" + path + "' failed");
}

DatasetHandle DatasetHandle::from_records(DatasetHeader header, std::vector<DataRecord> records) {
  if (records.size() != header.num_points) {
    throw ConfigError("record count does not match header");
  }
  DatasetHandle handle;
  handle.header_ = header;
  handle.records_ = std::move(records);
  handle.source_path_ = "<memory>";
  return handle;
}

DatasetHandle DatasetHandle::synth_clustered(std::uint32_t num_classes, std::uint32_t features,
                                             std::uint32_t points_per_class, float noise_sigma,
                                             std::uint64_t seed) {
  if (num_classes < 1 || features < 1 || points_per_class < 1) {
    throw ConfigError("synth_clustered: all sizes must be >= 1");
  }
  const std::uint32_t support = std::min(32u, features);
  const std::uint32_t extra = std::min(32u, features);

  DatasetHeader header;
  header.num_points = static_cast<std::uint64_t>(num_classes) * points_per_class;
  header.feature_dim = features;
  header.label_dim = num_classes;

  std::vector<DataRecord> records;
  records.reserve(header.num_points);

  std::vector<std::uint32_t> coords;
  std::vector<std::pair<std::uint32_t, float>> point;
  for (std::uint32_t c = 0; c < num_classes; ++c) {
    auto proto_rng = derive_rng({seed, 0x50524f54u /* "PROT" */, c});
    std::normal_distribution<float> unit(0.0f, 1.0f);
    // Distinct support coordinates via rejection (support << features in
    // practice; fall back handled by the duplicate check below).
    coords.clear();
    std::uniform_int_distribution<std::uint32_t> pick(0, features - 1);
    while (coords.size() < support) {
      const std::uint32_t idx = pick(proto_rng);
      if (std::find(coords.begin(), coords.end(), idx) == coords.end()) coords.push_back(idx);
    }
    std::vector<std::pair<std::uint32_t, float>> proto;
    proto.reserve(support);
    for (std::uint32_t idx : coords) proto.emplace_back(idx, unit(proto_rng));

    for (std::uint32_t k = 0; k < points_per_class; ++k) {
      auto rng = derive_rng({seed, 0x504f494eu /* "POIN" */, c, k});
      std::normal_distribution<float> noise(0.0f, noise_sigma);
      point.assign(proto.begin(), proto.end());
      if (noise_sigma > 0.0f) {
        for (auto& [idx, val] : point) val += noise(rng);
        for (std::uint32_t e = 0; e < extra; ++e) {
          const std::uint32_t idx = pick(rng);
          point.emplace_back(idx, noise(rng));
        }
      }
      // Keep the top `support` magnitudes, then sort by coordinate and drop
      // duplicate coordinates (first, i.e. largest-magnitude, wins).
      std::stable_sort(point.begin(), point.end(), [](const auto& a, const auto& b) {
        return std::fabs(a.second) > std::fabs(b.second);
      });
      if (point.size() > support) point.resize(support);
      std::stable_sort(point.begin(), point.end(),
                       [](const auto& a, const auto& b) { return a.first < b.first; });
      point.erase(std::unique(point.begin(), point.end(),
                              [](const auto& a, const auto& b) { return a.first == b.first; }),
                  point.end());

      float norm = 0.0f;
      for (const auto& [idx, val] : point) norm += val * val;
      norm = std::sqrt(norm);
      const float inv = norm > 0.0f ? 1.0f / norm : 1.0f;

      DataRecord rec;
      rec.labels.push_back(c);
      rec.features.dim = features;
      rec.features.indices.reserve(point.size());
      rec.features.values.reserve(point.size());
      for (const auto& [idx, val] : point) {
        rec.features.indices.push_back(idx);
        rec.features.values.push_back(val * inv);
      }
      records.push_back(std::move(rec));
    }
  }
  return from_records(header, std::move(records));
}

BatchStream::BatchStream(const DatasetHandle& data, std::uint32_t batch_size,
                         std::optional<std::uint64_t> shuffle_seed)
    : data_(data), batch_size_(batch_size) {
  if (batch_size_ < 1) throw ConfigError("batch size must be >= 1");
  order_.resize(data.size());
  std::iota(order_.begin(), order_.end(), 0u);
  if (shuffle_seed) {
    std::mt19937_64 rng(*shuffle_seed);
    std::shuffle(order_.begin(), order_.end(), rng);
  }
}

std::size_t BatchStream::num_batches() const {
  return (order_.size() + batch_size_ - 1) / batch_size_;
}

Batch BatchStream::batch(std::size_t index) const {
  const std::size_t begin = index * batch_size_;
  const std::size_t end = std::min(order_.size(), begin + batch_size_);
  Batch b;
  b.records.reserve(end - begin);
  for (std::size_t i = begin; i < end; ++i) {
    b.records.push_back(&data_.record(order_[i]));
  }
  return b;
}

}  // namespace hashmesh
