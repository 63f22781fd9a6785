#include "recall/io.hpp"

#include <fstream>

#include <json.hpp>

namespace recall {

using nlohmann::json;

void TensorFileWriter::add(const std::string& name, const Matd& m) {
    std::vector<double> data(static_cast<std::size_t>(m.size()));
    // Matd is row-major; copy row by row to keep the on-disk layout explicit.
    std::size_t k = 0;
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c) data[k++] = m(r, c);
    add_raw(name, {m.rows(), m.cols()}, std::move(data));
}

void TensorFileWriter::add(const std::string& name, const Vecd& v) {
    std::vector<double> data(v.data(), v.data() + v.size());
    add_raw(name, {v.size()}, std::move(data));
}

void TensorFileWriter::add_raw(const std::string& name,
                               std::vector<std::int64_t> shape,
                               std::vector<double> data) {
    std::int64_t expect = 1;
    for (auto d : shape) expect *= d;
    if (expect != static_cast<std::int64_t>(data.size()))
        throw std::invalid_argument(cat("tensor '", name, "': shape/data mismatch"));
    for (const auto& r : records_)
        if (r.name == name)
            throw std::invalid_argument(cat("tensor '", name, "' added twice"));
    records_.push_back({name, std::move(shape), std::move(data)});
}

void TensorFileWriter::write(const std::filesystem::path& bin_path,
                             const std::filesystem::path& manifest_path) const {
    std::ofstream bin(bin_path, std::ios::binary);
    if (!bin) throw std::runtime_error(cat("cannot open ", bin_path.string()));

    json tensors = json::object();
    std::uint64_t offset = 0;
    for (const auto& r : records_) {
        tensors[r.name] = {{"offset", offset}, {"shape", r.shape}};
        bin.write(reinterpret_cast<const char*>(r.data.data()),
                  static_cast<std::streamsize>(r.data.size() * sizeof(double)));
        offset += r.data.size();
    }
    if (!bin) throw std::runtime_error(cat("write failed for ", bin_path.string()));
    bin.close();

    json manifest = {{"container", "recall-tensors-v1"},
                     {"dtype", "float64"},
                     {"byte_order", "little"},
                     {"tensors", tensors}};
    std::ofstream mf(manifest_path);
    if (!mf) throw std::runtime_error(cat("cannot open ", manifest_path.string()));
    mf << manifest.dump(2) << "\n";
}

TensorFile TensorFile::open(const std::filesystem::path& manifest_path,
                            const std::filesystem::path& bin_path) {
    std::ifstream mf(manifest_path);
    if (!mf)
        throw std::runtime_error(cat("cannot open manifest ", manifest_path.string()));
    json manifest;
    try {
        mf >> manifest;
    } catch (const json::exception& e) {
        throw std::runtime_error(
            cat("manifest parse error in ", manifest_path.string(), ": ", e.what()));
    }
    if (manifest.value("dtype", "") != "float64")
        throw std::runtime_error("manifest: unsupported dtype (expected float64)");
    if (manifest.value("byte_order", "little") != "little")
        throw std::runtime_error("manifest: unsupported byte order");

    TensorFile tf;
    std::ifstream bin(bin_path, std::ios::binary | std::ios::ate);
    if (!bin)
        throw std::runtime_error(cat("cannot open payload ", bin_path.string()));
    const auto bytes = static_cast<std::uint64_t>(bin.tellg());
    if (bytes % sizeof(double) != 0)
        throw std::runtime_error("payload size is not a multiple of 8 bytes");
    tf.payload_.resize(bytes / sizeof(double));
    bin.seekg(0);
    bin.read(reinterpret_cast<char*>(tf.payload_.data()),
             static_cast<std::streamsize>(bytes));
    if (!bin) throw std::runtime_error(cat("read failed for ", bin_path.string()));

    for (const auto& [name, spec] : manifest.at("tensors").items()) {
        Entry e;
        e.offset = spec.at("offset").get<std::uint64_t>();
        e.shape = spec.at("shape").get<std::vector<std::int64_t>>();
        std::uint64_t count = 1;
        for (auto d : e.shape) {
            if (d < 0) throw std::runtime_error(cat("tensor '", name, "': bad shape"));
            count *= static_cast<std::uint64_t>(d);
        }
        if (e.offset + count > tf.payload_.size())
            throw std::runtime_error(
                cat("weights file truncated: tensor '", name, "' extends past payload"));
        tf.entries_[name] = std::move(e);
    }
    return tf;
}

const TensorFile::Entry& TensorFile::entry(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end())
        throw std::runtime_error(cat("missing tensor '", name, "'"));
    return it->second;
}

bool TensorFile::has(const std::string& name) const {
    return entries_.count(name) != 0;
}

const std::vector<std::int64_t>& TensorFile::shape(const std::string& name) const {
    return entry(name).shape;
}

std::vector<std::string> TensorFile::names() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& [name, _] : entries_) out.push_back(name);
    return out;
}

Matd TensorFile::matrix(const std::string& name) const {
    const Entry& e = entry(name);
    if (e.shape.size() != 2)
        throw std::runtime_error(cat("tensor '", name, "' is not rank-2"));
    Matd m(e.shape[0], e.shape[1]);
    std::size_t k = e.offset;
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = payload_[k++];
    return m;
}

Vecd TensorFile::vector(const std::string& name) const {
    const Entry& e = entry(name);
    if (e.shape.size() != 1)
        throw std::runtime_error(cat("tensor '", name, "' is not rank-1"));
    Vecd v(e.shape[0]);
    for (Eigen::Index i = 0; i < v.size(); ++i)
        v[i] = payload_[e.offset + static_cast<std::size_t>(i)];
    return v;
}

}  // namespace recall
