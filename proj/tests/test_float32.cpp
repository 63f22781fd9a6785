#include <doctest.h>

#include <random>

#include "recall/attribution.hpp"
#include "test_support.hpp"

using namespace recall;

// The 32-bit pipeline exists behind a cast; tolerances are loosened
// accordingly (the acceptance identities are stated for 64-bit).
TEST_SUITE("float32") {

TEST_CASE("single-precision pipeline tracks the double one") {
    std::mt19937_64 rng(307);
    for (int trial = 0; trial < 5; ++trial) {
        const ModelBundle<double> md = testsup::random_model(rng);
        const ModelBundle<float> mf = md.cast<float>();
        const auto tokens = testsup::random_tokens(rng, md.config.vocab_size, 6);

        const Matd ld = forward(md, tokens);
        const Matf lf = forward(mf, tokens);
        CHECK((ld.cast<float>() - lf).cwiseAbs().maxCoeff() < 5e-3f);

        const Trace<float> tr = traced_forward(mf, tokens);
        CHECK(reconstruction_error(tr) < 1e-4f);

        const Vec<float> sum = dla_sum_all(mf, tr, 5);
        CHECK((sum - tr.logits.row(5).transpose()).cwiseAbs().maxCoeff() < 5e-3f);
    }
}

}  // TEST_SUITE
