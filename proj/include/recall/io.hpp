#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "recall/numerics.hpp"

namespace recall {

// Flat binary tensor container: raw little-endian float64 payload plus a
// JSON manifest mapping tensor name -> (offset, shape). Offsets are in
// elements, shapes row-major. Used for model weights and trace dumps so
// round-trips are bit-exact and any language can parse them.
//
// Manifest layout:
//   {"container": "recall-tensors-v1", "dtype": "float64",
//    "byte_order": "little",
//    "tensors": {"name": {"offset": 0, "shape": [r, c]}, ...}}

static_assert(std::endian::native == std::endian::little,
              "tensor container assumes a little-endian host");

class TensorFileWriter {
  public:
    void add(const std::string& name, const Matd& m);
    void add(const std::string& name, const Vecd& v);
    void add_raw(const std::string& name, std::vector<std::int64_t> shape,
                 std::vector<double> data);

    // Writes payload and manifest; directories must already exist.
    void write(const std::filesystem::path& bin_path,
               const std::filesystem::path& manifest_path) const;

  private:
    struct Record {
        std::string name;
        std::vector<std::int64_t> shape;
        std::vector<double> data;
    };
    std::vector<Record> records_;
};

class TensorFile {
  public:
    static TensorFile open(const std::filesystem::path& manifest_path,
                           const std::filesystem::path& bin_path);

    bool has(const std::string& name) const;
    const std::vector<std::int64_t>& shape(const std::string& name) const;
    std::vector<std::string> names() const;

    Matd matrix(const std::string& name) const;   // rank-2 tensors
    Vecd vector(const std::string& name) const;   // rank-1 tensors

  private:
    struct Entry {
        std::uint64_t offset = 0;  // element offset into payload
        std::vector<std::int64_t> shape;
    };
    std::map<std::string, Entry> entries_;
    std::vector<double> payload_;

    const Entry& entry(const std::string& name) const;
};

}  // namespace recall
