#include "recall/interventions.hpp"

namespace recall {

void save_head_means(const std::vector<Vecd>& means, const ModelConfig& cfg,
                     const std::filesystem::path& manifest_path,
                     const std::filesystem::path& bin_path) {
    if (static_cast<int>(means.size()) != cfg.n_layers * cfg.n_heads)
        throw std::invalid_argument("save_head_means: wrong number of vectors");
    TensorFileWriter w;
    for (int l = 0; l < cfg.n_layers; ++l)
        for (int h = 0; h < cfg.n_heads; ++h)
            w.add(cat("head_mean.", l, ".", h),
                  means[static_cast<std::size_t>(l * cfg.n_heads + h)]);
    w.write(bin_path, manifest_path);
}

std::vector<Vecd> load_head_means(const ModelConfig& cfg,
                                  const std::filesystem::path& manifest_path,
                                  const std::filesystem::path& bin_path) {
    const TensorFile tf = TensorFile::open(manifest_path, bin_path);
    std::vector<Vecd> out;
    out.reserve(static_cast<std::size_t>(cfg.n_layers * cfg.n_heads));
    for (int l = 0; l < cfg.n_layers; ++l)
        for (int h = 0; h < cfg.n_heads; ++h) {
            Vecd v = tf.vector(cat("head_mean.", l, ".", h));
            if (v.size() != cfg.d_model)
                throw std::runtime_error("head mean has wrong width");
            out.push_back(std::move(v));
        }
    return out;
}

}  // namespace recall
