#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "hashmesh/sparse.hpp"

namespace hashmesh {

struct DatasetHeader {
  std::uint64_t num_points = 0;
  std::uint32_t feature_dim = 0;
  std::uint32_t label_dim = 0;
};

// Memory-resident dataset. Read-only after construction; concurrent readers
// are safe as long as each owns its batch cursor.
class DatasetHandle {
 public:
  const DatasetHeader& header() const { return header_; }
  std::size_t size() const { return records_.size(); }
  const DataRecord& record(std::size_t i) const { return records_[i]; }
  const std::string& source_path() const { return source_path_; }

  // Parses the extreme-classification text format:
  //   header line:  num_points feature_dim label_dim
  //   data lines:   l1,l2,... idx:val idx:val ...
  // Unsorted indices are re-sorted; duplicates, out-of-range indices/labels,
  // and header/record-count mismatches raise ConfigError with the line
  // number. CRLF is tolerated.
  static DatasetHandle parse_xc(const std::string& path);

  // Writes the same format (values round-trip exactly via shortest-form
  // float printing).
  void write_xc(const std::string& path) const;

  // One sparse Gaussian-bump prototype per class; each point is the
  // prototype plus noise on (support + a few random coordinates), keeps the
  // top-k magnitudes, and is L2-normalized. label = class id.
  static DatasetHandle synth_clustered(std::uint32_t num_classes, std::uint32_t features,
                                       std::uint32_t points_per_class, float noise_sigma,
                                       std::uint64_t seed);

  static DatasetHandle from_records(DatasetHeader header, std::vector<DataRecord> records);

 private:
  DatasetHeader header_;
  std::vector<DataRecord> records_;
  std::string source_path_;
};

// Deterministic batch sequence: a seeded permutation (file order when no
// seed) cut into ceil(num_points/B) batches; the last one may be short. All
// nodes constructed with the same seed iterate identical batches.
class BatchStream {
 public:
  BatchStream(const DatasetHandle& data, std::uint32_t batch_size,
              std::optional<std::uint64_t> shuffle_seed);

  std::size_t num_batches() const;
  Batch batch(std::size_t index) const;

 private:
  const DatasetHandle& data_;
  std::uint32_t batch_size_;
  std::vector<std::uint32_t> order_;
};

}  // namespace hashmesh
