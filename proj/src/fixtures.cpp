#include "recall/fixtures.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <random>

#include <json.hpp>

#include "recall/trace.hpp"

namespace recall::fixtures {

using nlohmann::json;

namespace {

constexpr double kEmb = 6.0;    // token-embedding coefficient
constexpr double kPos = 3.0;    // position-embedding coefficient
constexpr double kScore = 25.0; // saturated pre-softmax score margin
constexpr double kLnEps = 1e-5;

// Hands out orthonormal zero-mean directions, one coordinate pair each:
// direction k is (+s, -s)/sqrt(2) on a seed-permuted pair of coordinates.
class DirAlloc {
  public:
    DirAlloc(int d_model, std::uint64_t seed) : d_(d_model) {
        const int pairs = d_model / 2;
        perm_.resize(static_cast<std::size_t>(pairs));
        std::iota(perm_.begin(), perm_.end(), 0);
        std::mt19937_64 rng(seed * 0x9e3779b97f4a7c15ULL + 1);
        std::shuffle(perm_.begin(), perm_.end(), rng);
        signs_.resize(static_cast<std::size_t>(pairs));
        for (auto& s : signs_) s = (rng() & 1) ? 1.0 : -1.0;
    }

    Vecd next() {
        if (next_ >= perm_.size())
            throw std::runtime_error(
                "fixture dims too small for the planted structure");
        const int p = perm_[next_];
        const double s = signs_[next_];
        ++next_;
        Vecd v = Vecd::Zero(d_);
        v[2 * p] = s / std::sqrt(2.0);
        v[2 * p + 1] = -s / std::sqrt(2.0);
        return v;
    }

  private:
    int d_;
    std::vector<int> perm_;
    std::vector<double> signs_;
    std::size_t next_ = 0;
};

ModelBundle<double> zero_model(const ModelConfig& cfg) {
    ModelBundle<double> m;
    m.config = cfg;
    m.token_embed = Matd::Zero(cfg.vocab_size, cfg.d_model);
    m.pos_embed = Matd::Zero(cfg.max_seq, cfg.d_model);
    m.layers.resize(static_cast<std::size_t>(cfg.n_layers));
    for (auto& lw : m.layers) {
        lw.ln1 = {Vecd::Ones(cfg.d_model), Vecd::Zero(cfg.d_model)};
        lw.ln2 = {Vecd::Ones(cfg.d_model), Vecd::Zero(cfg.d_model)};
        for (int h = 0; h < cfg.n_heads; ++h)
            lw.heads.push_back({Matd::Zero(cfg.d_model, cfg.d_head),
                                Matd::Zero(cfg.d_model, cfg.d_head),
                                Matd::Zero(cfg.d_model, cfg.d_head),
                                Matd::Zero(cfg.d_head, cfg.d_model)});
        lw.mlp = {Matd::Zero(cfg.d_model, cfg.d_mlp), Vecd::Zero(cfg.d_mlp),
                  Matd::Zero(cfg.d_mlp, cfg.d_model), Vecd::Zero(cfg.d_model)};
    }
    m.final_ln = {Vecd::Ones(cfg.d_model), Vecd::Zero(cfg.d_model)};
    m.unembed = Matd::Zero(cfg.d_model, cfg.vocab_size);
    return m;
}

struct VocabBuilder {
    std::vector<std::string> tokens;
    int add(std::string s) {
        tokens.push_back(std::move(s));
        return static_cast<int>(tokens.size()) - 1;
    }
    void pad_to(int n) {
        int k = 0;
        while (static_cast<int>(tokens.size()) < n) add(cat("pad", k++));
    }
};

// Assembles a planted model. The write-coefficient convention: routing a
// token direction with content coefficient kEmb through LN scale `inv` onto
// a channel whose output row is (q/(inv*kEmb)) * u realizes a residual write
// of q * u at attention one.
struct Builder {
    ModelConfig cfg;
    DirAlloc alloc;
    ModelBundle<double> model;
    double inv0;  // sublayer-LN scale of any layer-0 input row

    Builder(const ModelConfig& c, std::uint64_t seed)
        : cfg(c), alloc(c.d_model, seed), model(zero_model(c)) {
        inv0 = 1.0 / std::sqrt((kEmb * kEmb + kPos * kPos) / cfg.d_model + kLnEps);
    }

    Vecd dir() { return alloc.next(); }

    void embed_token(int tok, const Vecd& e) {
        model.token_embed.row(tok) = kEmb * e.transpose();
    }
    void embed_pos(int p, const Vecd& e) {
        model.pos_embed.row(p) = kPos * e.transpose();
    }
    void unembed_token(int tok, const Vecd& u) { model.unembed.col(tok) = u; }

    HeadWeights<double>& head(int l, int h) {
        return model.layers[static_cast<std::size_t>(l)]
            .heads[static_cast<std::size_t>(h)];
    }

    double qk_gain(double inv_q, double q_coef, double inv_k, double k_coef) const {
        return std::sqrt(kScore * std::sqrt(static_cast<double>(cfg.d_head)) /
                         (inv_q * q_coef * inv_k * k_coef));
    }
    void add_query(int l, int h, int channel, const Vecd& dir, double gain) {
        head(l, h).wq.col(channel) += gain * dir;
    }
    void add_key(int l, int h, int channel, const Vecd& dir, double gain) {
        head(l, h).wk.col(channel) += gain * dir;
    }
    // Saturate (dest token content q_dir) -> (src position/content k_dir).
    void saturate(int l, int h, int channel, const Vecd& q_dir, double q_coef,
                  const Vecd& k_dir, double k_coef, double inv_q, double inv_k) {
        const double g = qk_gain(inv_q, q_coef, inv_k, k_coef);
        add_query(l, h, channel, q_dir, g);
        add_key(l, h, channel, k_dir, g);
    }

    void route(int l, int h, int channel, const Vecd& in_dir) {
        head(l, h).wv.col(channel) += in_dir;
    }
    void channel_write(int l, int h, int channel, const Vecd& write) {
        head(l, h).wo.row(channel) += write.transpose();
    }
};

FactEntry template_entry(const Vocab& vocab, int fact_tok, int subj_tok,
                         int rel_tok, int of_tok, const std::string& subject,
                         const std::string& relation_id,
                         const std::string& relation_text,
                         const std::string& attribute,
                         std::vector<std::string> s_minus_a,
                         std::vector<std::string> r_minus_a) {
    FactEntry e;
    e.subject = subject;
    e.relation_id = relation_id;
    e.relation_text = relation_text;
    e.attribute = attribute;
    e.prompt = cat("fact: ", subject, " ", relation_text);
    e.prompt_tokens = {fact_tok, subj_tok, rel_tok, of_tok};
    e.spans.prefix = {0, 1};
    e.spans.subject = {1, 2};
    e.spans.relation = {2, 3};
    e.spans.end_pos = 3;
    e.s_minus_a = std::move(s_minus_a);
    e.r_minus_a = std::move(r_minus_a);
    return finalize_entry(std::move(e), vocab);
}

void expect_component_zero_on(EntryExpectations& ex, ComponentId c, int token) {
    ex.dla.push_back({c, std::nullopt, token, 0.0});
}

// ---------------------------------------------------------------------------
// subject_head: head (0,0) attends END -> final SUBJECT token and maps each
// subject's embedding onto its attribute's unembedding direction.
// ---------------------------------------------------------------------------

constexpr double kSubjectQ = 6.0;  // residual write coefficient of the answer

Fixture build_subject_head(std::uint64_t seed, const ModelConfig* dims) {
    ModelConfig cfg{2, 2, 64, 12, 8, 112, 4, kLnEps, ResidualStyle::kParallel};
    if (dims != nullptr) cfg = *dims;
    const int n_subj = 8;

    VocabBuilder vb;
    const int fact = vb.add("fact:");
    const int of = vb.add("of");
    const int rel = vb.add("r0");
    std::vector<int> subj(n_subj), attr(n_subj), dist(n_subj);
    for (int i = 0; i < n_subj; ++i) subj[i] = vb.add(cat("s", i));
    for (int i = 0; i < n_subj; ++i) attr[i] = vb.add(cat("a", i));
    for (int i = 0; i < n_subj; ++i) dist[i] = vb.add(cat("d", i));
    std::vector<int> extra(4);
    for (int k = 0; k < 4; ++k) extra[k] = vb.add(cat("x", k));
    vb.pad_to(cfg.vocab_size);
    Vocab vocab(vb.tokens);

    Builder b(cfg, seed);
    const Vecd e_fact = b.dir(), e_of = b.dir(), e_rel = b.dir();
    std::vector<Vecd> e_s, u_a, pi;
    for (int i = 0; i < n_subj; ++i) e_s.push_back(b.dir());
    for (int i = 0; i < n_subj; ++i) u_a.push_back(b.dir());
    for (int p = 0; p < 4; ++p) pi.push_back(b.dir());

    b.embed_token(fact, e_fact);
    b.embed_token(of, e_of);
    b.embed_token(rel, e_rel);
    for (int i = 0; i < n_subj; ++i) b.embed_token(subj[i], e_s[i]);
    for (int p = 0; p < 4; ++p) b.embed_pos(p, pi[p]);
    for (int i = 0; i < n_subj; ++i) b.unembed_token(attr[i], u_a[i]);

    b.saturate(0, 0, 0, e_of, kEmb, pi[1], kPos, b.inv0, b.inv0);
    for (int i = 0; i < n_subj; ++i) {
        b.route(0, 0, 1 + i, e_s[i]);
        b.channel_write(0, 0, 1 + i, (kSubjectQ / (b.inv0 * kEmb)) * u_a[i]);
    }
    b.model.validate();

    Fixture fx;
    fx.spec = {FixtureName::kSubjectHead, seed, cfg, {}, {}};
    for (int i = 0; i < n_subj; ++i) fx.spec.planted_facts[subj[i]] = attr[i];
    fx.model = std::move(b.model);
    fx.vocab = std::move(vocab);
    fx.roles["subject_head"] = ComponentId::head(0, 0);

    for (int i = 0; i < n_subj; ++i) {
        std::vector<std::string> r_list;
        for (int j = 0; j < n_subj; ++j)
            if (j != i) r_list.push_back(cat("a", j));
        r_list.push_back("x0");
        r_list.push_back("x1");
        fx.entries.push_back(template_entry(fx.vocab, fact, subj[i], rel, of,
                                            cat("s", i), "r0", "r0 of", cat("a", i),
                                            {cat("d", i)}, std::move(r_list)));
    }

    for (int i = 0; i < n_subj; ++i) {
        const Trace<double> tr = traced_forward(fx.model, fx.entries[i].prompt_tokens);
        const double p = tr.attn_prob(0, 0)(3, 1);
        const double sig = tr.final_ln_inv_std[3];
        const double v = p * kSubjectQ * sig;
        EntryExpectations ex;
        const ComponentId head = ComponentId::head(0, 0);
        ex.dla.push_back({head, std::nullopt, attr[i], v});
        ex.dla.push_back({head, Group::kSubject, attr[i], v});
        ex.dla.push_back({head, Group::kRelation, attr[i], 0.0});
        ex.dla.push_back({head, Group::kPrefix, attr[i], 0.0});
        ex.dla.push_back({head, Group::kEnd, attr[i], 0.0});
        ex.dla.push_back({head, std::nullopt, attr[(i + 1) % n_subj], 0.0});
        ex.dla.push_back({head, std::nullopt, dist[i], 0.0});
        expect_component_zero_on(ex, ComponentId::head(0, 1), attr[i]);
        expect_component_zero_on(ex, ComponentId::head(1, 0), attr[i]);
        expect_component_zero_on(ex, ComponentId::mlp(0), attr[i]);
        expect_component_zero_on(ex, ComponentId::mlp(1), attr[i]);
        expect_component_zero_on(ex, ComponentId::embed(), attr[i]);
        expect_component_zero_on(ex, ComponentId::bias(), attr[i]);
        fx.expected.push_back(std::move(ex));
    }
    return fx;
}

// ---------------------------------------------------------------------------
// relation_head: head (0,0) attends END -> last RELATION token and writes
// equal weight onto every attribute in the relation's set R.
// ---------------------------------------------------------------------------

constexpr double kRelationQ = 3.0;

Fixture build_relation_head(std::uint64_t seed, const ModelConfig* dims) {
    ModelConfig cfg{2, 2, 64, 12, 8, 112, 4, kLnEps, ResidualStyle::kParallel};
    if (dims != nullptr) cfg = *dims;
    const int n_subj = 8;

    VocabBuilder vb;
    const int fact = vb.add("fact:");
    const int of = vb.add("of");
    const int rel = vb.add("r0");
    std::vector<int> subj(n_subj), attr(n_subj), dist(n_subj);
    for (int i = 0; i < n_subj; ++i) subj[i] = vb.add(cat("s", i));
    for (int i = 0; i < n_subj; ++i) attr[i] = vb.add(cat("a", i));
    for (int i = 0; i < n_subj; ++i) dist[i] = vb.add(cat("d", i));
    std::vector<int> extra(2);
    for (int k = 0; k < 2; ++k) extra[k] = vb.add(cat("x", k));
    vb.pad_to(cfg.vocab_size);
    Vocab vocab(vb.tokens);

    Builder b(cfg, seed);
    const Vecd e_fact = b.dir(), e_of = b.dir(), e_rel = b.dir();
    std::vector<Vecd> e_s, u_a, u_x, pi;
    for (int i = 0; i < n_subj; ++i) e_s.push_back(b.dir());
    for (int i = 0; i < n_subj; ++i) u_a.push_back(b.dir());
    for (int k = 0; k < 2; ++k) u_x.push_back(b.dir());
    for (int p = 0; p < 4; ++p) pi.push_back(b.dir());

    b.embed_token(fact, e_fact);
    b.embed_token(of, e_of);
    b.embed_token(rel, e_rel);
    for (int i = 0; i < n_subj; ++i) b.embed_token(subj[i], e_s[i]);
    for (int p = 0; p < 4; ++p) b.embed_pos(p, pi[p]);
    for (int i = 0; i < n_subj; ++i) b.unembed_token(attr[i], u_a[i]);
    for (int k = 0; k < 2; ++k) b.unembed_token(extra[k], u_x[k]);

    b.saturate(0, 0, 0, e_of, kEmb, pi[2], kPos, b.inv0, b.inv0);
    Vecd uniform_r = Vecd::Zero(cfg.d_model);
    for (int i = 0; i < n_subj; ++i) uniform_r += u_a[i];
    for (int k = 0; k < 2; ++k) uniform_r += u_x[k];
    b.route(0, 0, 1, e_rel);
    b.channel_write(0, 0, 1, (kRelationQ / (b.inv0 * kEmb)) * uniform_r);
    b.model.validate();

    Fixture fx;
    fx.spec = {FixtureName::kRelationHead, seed, cfg, {}, {}};
    for (int i = 0; i < n_subj; ++i) fx.spec.planted_facts[subj[i]] = attr[i];
    for (int i = 0; i < n_subj; ++i) fx.spec.planted_r.push_back(attr[i]);
    for (int k = 0; k < 2; ++k) fx.spec.planted_r.push_back(extra[k]);
    fx.model = std::move(b.model);
    fx.vocab = std::move(vocab);
    fx.roles["relation_head"] = ComponentId::head(0, 0);

    for (int i = 0; i < n_subj; ++i) {
        std::vector<std::string> r_list;
        for (int j = 0; j < n_subj; ++j)
            if (j != i) r_list.push_back(cat("a", j));
        r_list.push_back("x0");
        r_list.push_back("x1");
        fx.entries.push_back(template_entry(fx.vocab, fact, subj[i], rel, of,
                                            cat("s", i), "r0", "r0 of", cat("a", i),
                                            {cat("d", i)}, std::move(r_list)));
    }

    for (int i = 0; i < n_subj; ++i) {
        const Trace<double> tr = traced_forward(fx.model, fx.entries[i].prompt_tokens);
        const double p = tr.attn_prob(0, 0)(3, 2);
        const double sig = tr.final_ln_inv_std[3];
        const double v = p * kRelationQ * sig;
        EntryExpectations ex;
        const ComponentId head = ComponentId::head(0, 0);
        for (int t : fx.spec.planted_r) ex.dla.push_back({head, std::nullopt, t, v});
        ex.dla.push_back({head, Group::kRelation, attr[i], v});
        ex.dla.push_back({head, Group::kSubject, attr[i], 0.0});
        ex.dla.push_back({head, std::nullopt, dist[i], 0.0});
        expect_component_zero_on(ex, ComponentId::head(0, 1), attr[i]);
        expect_component_zero_on(ex, ComponentId::mlp(0), attr[i]);
        expect_component_zero_on(ex, ComponentId::embed(), attr[i]);
        expect_component_zero_on(ex, ComponentId::bias(), attr[i]);
        fx.expected.push_back(std::move(ex));
    }
    return fx;
}

// ---------------------------------------------------------------------------
// propagation: head (0,0) copies each subject's message onto the last
// RELATION position; head (1,0) reads it from there and boosts the answer on
// top of a generic relation-attribute write. Blocking RELATION<-SUBJECT
// attention severs the copy, leaving only the generic write.
// ---------------------------------------------------------------------------

constexpr double kMoverQ = 4.0;    // message coefficient at the relation position
constexpr double kGenericA = 1.2;  // generic write onto each dataset attribute
constexpr double kGenericX = 1.8;  // generic write onto extra relation attributes
constexpr double kBoostQ = 5.0;    // propagated boost onto the correct answer

Fixture build_propagation(std::uint64_t seed, const ModelConfig* dims) {
    ModelConfig cfg{2, 2, 80, 12, 8, 112, 4, kLnEps, ResidualStyle::kParallel};
    if (dims != nullptr) cfg = *dims;
    const int n_subj = 8;
    const int n_extra = 4;

    VocabBuilder vb;
    const int fact = vb.add("fact:");
    const int of = vb.add("of");
    const int rel = vb.add("r0");
    std::vector<int> subj(n_subj), attr(n_subj), extra(n_extra);
    for (int i = 0; i < n_subj; ++i) subj[i] = vb.add(cat("s", i));
    for (int i = 0; i < n_subj; ++i) attr[i] = vb.add(cat("a", i));
    for (int k = 0; k < n_extra; ++k) extra[k] = vb.add(cat("x", k));
    vb.pad_to(cfg.vocab_size);
    Vocab vocab(vb.tokens);

    Builder b(cfg, seed);
    const Vecd e_fact = b.dir(), e_of = b.dir(), e_rel = b.dir();
    std::vector<Vecd> e_s, u_a, u_x, msg, pi;
    for (int i = 0; i < n_subj; ++i) e_s.push_back(b.dir());
    for (int i = 0; i < n_subj; ++i) u_a.push_back(b.dir());
    for (int k = 0; k < n_extra; ++k) u_x.push_back(b.dir());
    for (int i = 0; i < n_subj; ++i) msg.push_back(b.dir());
    for (int p = 0; p < 4; ++p) pi.push_back(b.dir());

    b.embed_token(fact, e_fact);
    b.embed_token(of, e_of);
    b.embed_token(rel, e_rel);
    for (int i = 0; i < n_subj; ++i) b.embed_token(subj[i], e_s[i]);
    for (int p = 0; p < 4; ++p) b.embed_pos(p, pi[p]);
    for (int i = 0; i < n_subj; ++i) b.unembed_token(attr[i], u_a[i]);
    for (int k = 0; k < n_extra; ++k) b.unembed_token(extra[k], u_x[k]);

    // Mover fires from the relation token's own query (position 2).
    b.saturate(0, 0, 0, e_rel, kEmb, pi[1], kPos, b.inv0, b.inv0);
    for (int i = 0; i < n_subj; ++i) {
        b.route(0, 0, 1 + i, e_s[i]);
        b.channel_write(0, 0, 1 + i, (kMoverQ / (b.inv0 * kEmb)) * msg[i]);
    }

    // Build-time LN-scale estimates for layer 1 (the mover's idle END row is
    // exactly uniform, so the END message coefficient is kMoverQ/4).
    const double norm0 = kEmb * kEmb + kPos * kPos;
    const double inv1_end_est =
        1.0 / std::sqrt((norm0 + (kMoverQ / 4) * (kMoverQ / 4)) / cfg.d_model + kLnEps);
    const double inv1_p2_est =
        1.0 / std::sqrt((norm0 + kMoverQ * kMoverQ) / cfg.d_model + kLnEps);

    b.saturate(1, 0, 0, e_of, kEmb, pi[2], kPos, inv1_end_est, inv1_p2_est);
    Vecd generic = Vecd::Zero(cfg.d_model);
    for (int i = 0; i < n_subj; ++i) generic += kGenericA * u_a[i];
    for (int k = 0; k < n_extra; ++k) generic += kGenericX * u_x[k];
    b.route(1, 0, 1, e_rel);
    b.channel_write(1, 0, 1, (1.0 / (inv1_p2_est * kEmb)) * generic);
    for (int i = 0; i < n_subj; ++i) {
        b.route(1, 0, 2 + i, msg[i]);
        b.channel_write(1, 0, 2 + i,
                        (kBoostQ / (inv1_p2_est * kMoverQ)) * u_a[i]);
    }
    b.model.validate();

    Fixture fx;
    fx.spec = {FixtureName::kPropagation, seed, cfg, {}, {}};
    for (int i = 0; i < n_subj; ++i) fx.spec.planted_facts[subj[i]] = attr[i];
    for (int i = 0; i < n_subj; ++i) fx.spec.planted_r.push_back(attr[i]);
    for (int k = 0; k < n_extra; ++k) fx.spec.planted_r.push_back(extra[k]);
    fx.model = std::move(b.model);
    fx.vocab = std::move(vocab);
    fx.roles["mover_head"] = ComponentId::head(0, 0);
    fx.roles["reader_head"] = ComponentId::head(1, 0);

    for (int i = 0; i < n_subj; ++i) {
        std::vector<std::string> r_list;
        for (int j = 0; j < n_subj; ++j)
            if (j != i) r_list.push_back(cat("a", j));
        for (int k = 0; k < n_extra; ++k) r_list.push_back(cat("x", k));
        fx.entries.push_back(template_entry(fx.vocab, fact, subj[i], rel, of,
                                            cat("s", i), "r0", "r0 of", cat("a", i),
                                            {}, std::move(r_list)));
    }

    for (int i = 0; i < n_subj; ++i) {
        const Trace<double> tr = traced_forward(fx.model, fx.entries[i].prompt_tokens);
        const double p_mv = tr.attn_prob(0, 0)(2, 1);
        const double p_rd = tr.attn_prob(1, 0)(3, 2);
        const double sig = tr.final_ln_inv_std[3];
        const double message = p_mv * kMoverQ;
        const double inv1_p2 =
            1.0 / std::sqrt((norm0 + message * message) / cfg.d_model + kLnEps);
        const double gen_scale = p_rd * inv1_p2 / inv1_p2_est;
        const double boost =
            p_rd * inv1_p2 * message * (kBoostQ / (inv1_p2_est * kMoverQ));

        EntryExpectations ex;
        const ComponentId reader = ComponentId::head(1, 0);
        ex.dla.push_back(
            {reader, std::nullopt, attr[i], (gen_scale * kGenericA + boost) * sig});
        ex.dla.push_back({reader, std::nullopt, attr[(i + 1) % n_subj],
                          gen_scale * kGenericA * sig});
        ex.dla.push_back({reader, std::nullopt, extra[0], gen_scale * kGenericX * sig});
        ex.dla.push_back({reader, Group::kRelation, attr[i],
                          (gen_scale * kGenericA + boost) * sig});
        ex.dla.push_back({reader, Group::kSubject, attr[i], 0.0});
        ex.dla.push_back({reader, Group::kEnd, attr[i], 0.0});
        expect_component_zero_on(ex, ComponentId::head(0, 0), attr[i]);
        expect_component_zero_on(ex, ComponentId::head(0, 1), attr[i]);
        expect_component_zero_on(ex, ComponentId::mlp(0), attr[i]);
        expect_component_zero_on(ex, ComponentId::mlp(1), attr[i]);
        expect_component_zero_on(ex, ComponentId::embed(), attr[i]);
        expect_component_zero_on(ex, ComponentId::bias(), attr[i]);
        fx.expected.push_back(std::move(ex));
    }
    return fx;
}

// ---------------------------------------------------------------------------
// composite: four mechanisms at once, each positive on the answer but none
// sufficient alone: a subject head (with a stronger subject distractor), a
// relation head (with a stronger generic relation attribute), a dual-role
// head reading both sources evenly, and an MLP fed relation identity by a
// mover head. The sum puts the answer on top for every bundled entry.
// ---------------------------------------------------------------------------

constexpr double kCompSubjA = 2.0;   // subject head: per-fact answer write
constexpr double kCompSubjD = 2.6;   // subject head: subject-distractor write
constexpr double kCompRelA = 1.6;    // relation head: per-attribute write
constexpr double kCompRelG = 2.4;    // relation head: generic distractor write
constexpr double kCompMixA = 0.8;    // mixed head: per-side answer write
constexpr double kCompMixG = 2.0;    // mixed head: relation-side distractor
constexpr double kCompMoverQ = 4.0;  // relation-identity message to END
constexpr double kCompMlpA = 1.4;    // MLP: per-attribute write
constexpr double kCompMlpG = 1.8;    // MLP: generic distractor write
constexpr double kCompPreact = 3.0;  // target GELU operating point

Fixture build_composite(std::uint64_t seed, const ModelConfig* dims) {
    ModelConfig cfg{2, 4, 144, 16, 8, 120, 4, kLnEps, ResidualStyle::kParallel};
    if (dims != nullptr) cfg = *dims;
    const int n_subj = 8;
    const int n_rel = 3;
    const int n_extra = 4;
    // Fact coverage: relation 0 knows every subject, relations 1 and 2 the
    // first six. 20 tuples in total.
    auto covered = [](int s, int j) { return j == 0 || s < 6; };

    VocabBuilder vb;
    const int fact = vb.add("fact:");
    const int of = vb.add("of");
    std::vector<int> rel(n_rel);
    for (int j = 0; j < n_rel; ++j) rel[j] = vb.add(cat("r", j));
    std::vector<int> subj(n_subj), dist(n_subj);
    for (int i = 0; i < n_subj; ++i) subj[i] = vb.add(cat("s", i));
    std::map<std::pair<int, int>, int> attr;  // (subject idx, relation idx) -> token
    for (int s = 0; s < n_subj; ++s)
        for (int j = 0; j < n_rel; ++j)
            if (covered(s, j)) attr[{s, j}] = vb.add(cat("a", s, "r", j));
    std::vector<std::vector<int>> extra(n_rel, std::vector<int>(n_extra));
    for (int j = 0; j < n_rel; ++j)
        for (int k = 0; k < n_extra; ++k) extra[j][k] = vb.add(cat("x", j, "_", k));
    std::vector<int> gtok(n_rel);
    for (int j = 0; j < n_rel; ++j) gtok[j] = vb.add(cat("g", j));
    for (int i = 0; i < n_subj; ++i) dist[i] = vb.add(cat("d", i));
    vb.pad_to(cfg.vocab_size);
    Vocab vocab(vb.tokens);

    Builder b(cfg, seed);
    const Vecd e_fact = b.dir(), e_of = b.dir();
    std::vector<Vecd> e_r, e_s, u_d, u_g, m, pi;
    for (int j = 0; j < n_rel; ++j) e_r.push_back(b.dir());
    for (int i = 0; i < n_subj; ++i) e_s.push_back(b.dir());
    std::map<std::pair<int, int>, Vecd> u_a;
    for (const auto& [key, tok] : attr) u_a.emplace(key, b.dir());
    std::vector<std::vector<Vecd>> u_x(n_rel);
    for (int j = 0; j < n_rel; ++j)
        for (int k = 0; k < n_extra; ++k) u_x[j].push_back(b.dir());
    for (int j = 0; j < n_rel; ++j) u_g.push_back(b.dir());
    for (int i = 0; i < n_subj; ++i) u_d.push_back(b.dir());
    for (int j = 0; j < n_rel; ++j) m.push_back(b.dir());
    for (int p = 0; p < 4; ++p) pi.push_back(b.dir());

    b.embed_token(fact, e_fact);
    b.embed_token(of, e_of);
    for (int j = 0; j < n_rel; ++j) b.embed_token(rel[j], e_r[j]);
    for (int i = 0; i < n_subj; ++i) b.embed_token(subj[i], e_s[i]);
    for (int p = 0; p < 4; ++p) b.embed_pos(p, pi[p]);
    for (const auto& [key, tok] : attr) b.unembed_token(tok, u_a.at(key));
    for (int j = 0; j < n_rel; ++j)
        for (int k = 0; k < n_extra; ++k) b.unembed_token(extra[j][k], u_x[j][k]);
    for (int j = 0; j < n_rel; ++j) b.unembed_token(gtok[j], u_g[j]);
    for (int i = 0; i < n_subj; ++i) b.unembed_token(dist[i], u_d[i]);

    const double content = b.inv0 * kEmb;

    // h0: subject head. Misfires by design: writes every known fact of the
    // subject whatever the prompt's relation is.
    b.saturate(0, 0, 0, e_of, kEmb, pi[1], kPos, b.inv0, b.inv0);
    for (int s = 0; s < n_subj; ++s) {
        Vecd w = (kCompSubjD / content) * u_d[s];
        for (int j = 0; j < n_rel; ++j)
            if (covered(s, j)) w += (kCompSubjA / content) * u_a.at({s, j});
        b.route(0, 0, 1 + s, e_s[s]);
        b.channel_write(0, 0, 1 + s, w);
    }

    // h1: relation head, subject-independent.
    b.saturate(0, 1, 0, e_of, kEmb, pi[2], kPos, b.inv0, b.inv0);
    for (int j = 0; j < n_rel; ++j) {
        Vecd w = (kCompRelG / content) * u_g[j];
        for (int s = 0; s < n_subj; ++s)
            if (covered(s, j)) w += (kCompRelA / content) * u_a.at({s, j});
        for (int k = 0; k < n_extra; ++k) w += (kCompRelA / content) * u_x[j][k];
        b.route(0, 1, 1 + j, e_r[j]);
        b.channel_write(0, 1, 1 + j, w);
    }

    // h2: mixed head, attention split evenly between SUBJECT and RELATION.
    {
        const double g = b.qk_gain(b.inv0, kEmb, b.inv0, kPos);
        b.add_query(0, 2, 0, e_of, g);
        b.add_key(0, 2, 0, pi[1], g);
        b.add_key(0, 2, 0, pi[2], g);
    }
    const double half_content = 0.5 * content;  // per-side attention mass
    for (int s = 0; s < n_subj; ++s) {
        Vecd w = Vecd::Zero(cfg.d_model);
        for (int j = 0; j < n_rel; ++j)
            if (covered(s, j)) w += (kCompMixA / half_content) * u_a.at({s, j});
        b.route(0, 2, 1 + s, e_s[s]);
        b.channel_write(0, 2, 1 + s, w);
    }
    for (int j = 0; j < n_rel; ++j) {
        Vecd w = (kCompMixG / half_content) * u_g[j];
        for (int s = 0; s < n_subj; ++s)
            if (covered(s, j)) w += (kCompMixA / half_content) * u_a.at({s, j});
        for (int k = 0; k < n_extra; ++k) w += (kCompMixA / half_content) * u_x[j][k];
        b.route(0, 2, 9 + j, e_r[j]);
        b.channel_write(0, 2, 9 + j, w);
    }

    // h3: relation-identity mover feeding the layer-1 MLP.
    b.saturate(0, 3, 0, e_of, kEmb, pi[2], kPos, b.inv0, b.inv0);
    for (int j = 0; j < n_rel; ++j) {
        b.route(0, 3, 1 + j, e_r[j]);
        b.channel_write(0, 3, 1 + j, (kCompMoverQ / content) * m[j]);
    }

    // Layer-1 MLP: one hidden unit per relation, gated by the message.
    // Operating-point estimate from a representative prompt (s0, r0).
    double norm_est = kEmb * kEmb + kPos * kPos + kCompMoverQ * kCompMoverQ;
    {
        std::map<int, double> coef;
        for (int j = 0; j < n_rel; ++j)
            coef[attr.at({0, j})] += kCompSubjA + kCompMixA;
        coef[dist[0]] += kCompSubjD;
        for (int s = 0; s < n_subj; ++s)
            if (covered(s, 0) && s != 0) coef[attr.at({s, 0})] += kCompRelA + kCompMixA;
        coef[attr.at({0, 0})] += kCompRelA + kCompMixA;
        for (int k = 0; k < n_extra; ++k)
            coef[extra[0][k]] += kCompRelA + kCompMixA;
        coef[gtok[0]] += kCompRelG + kCompMixG;
        for (const auto& [tok, c] : coef) norm_est += c * c;
    }
    const double inv1_end_est = 1.0 / std::sqrt(norm_est / cfg.d_model + kLnEps);
    const double gelu_est = gelu(kCompPreact);
    auto& mlp = b.model.layers[1].mlp;
    for (int j = 0; j < n_rel; ++j) {
        mlp.w_in.col(j) = (kCompPreact / (inv1_end_est * kCompMoverQ)) * m[j];
        Vecd w = (kCompMlpG / gelu_est) * u_g[j];
        for (int s = 0; s < n_subj; ++s)
            if (covered(s, j)) w += (kCompMlpA / gelu_est) * u_a.at({s, j});
        for (int k = 0; k < n_extra; ++k) w += (kCompMlpA / gelu_est) * u_x[j][k];
        mlp.w_out.row(j) = w.transpose();
    }
    b.model.validate();

    Fixture fx;
    fx.spec = {FixtureName::kComposite, seed, cfg, {}, {}};
    for (int s = 0; s < n_subj; ++s) fx.spec.planted_facts[subj[s]] = attr.at({s, 0});
    for (int s = 0; s < n_subj; ++s) fx.spec.planted_r.push_back(attr.at({s, 0}));
    for (int k = 0; k < n_extra; ++k) fx.spec.planted_r.push_back(extra[0][k]);
    fx.spec.planted_r.push_back(gtok[0]);
    fx.model = std::move(b.model);
    fx.vocab = std::move(vocab);
    fx.roles["subject_head"] = ComponentId::head(0, 0);
    fx.roles["relation_head"] = ComponentId::head(0, 1);
    fx.roles["mixed_head"] = ComponentId::head(0, 2);
    fx.roles["mover_head"] = ComponentId::head(0, 3);
    fx.roles["mlp"] = ComponentId::mlp(1);

    std::vector<std::pair<int, int>> tuples;
    for (int j = 0; j < n_rel; ++j)
        for (int s = 0; s < n_subj; ++s)
            if (covered(s, j)) tuples.emplace_back(s, j);

    for (auto [s, j] : tuples) {
        std::vector<std::string> s_list = {cat("d", s)};
        for (int k = 0; k < n_rel; ++k)
            if (k != j && covered(s, k)) s_list.push_back(cat("a", s, "r", k));
        std::vector<std::string> r_list = {cat("g", j)};
        for (int s2 = 0; s2 < n_subj; ++s2)
            if (s2 != s && covered(s2, j)) r_list.push_back(cat("a", s2, "r", j));
        for (int k = 0; k < n_extra; ++k) r_list.push_back(cat("x", j, "_", k));
        fx.entries.push_back(template_entry(
            fx.vocab, fact, subj[s], rel[j], of, cat("s", s), cat("r", j),
            cat("r", j, " of"), cat("a", s, "r", j), std::move(s_list),
            std::move(r_list)));
    }

    for (std::size_t idx = 0; idx < tuples.size(); ++idx) {
        const auto [s, j] = tuples[idx];
        const Trace<double> tr =
            traced_forward(fx.model, fx.entries[idx].prompt_tokens);
        const double p0 = tr.attn_prob(0, 0)(3, 1);
        const double p1 = tr.attn_prob(0, 1)(3, 2);
        const double p2s = tr.attn_prob(0, 2)(3, 1);
        const double p2r = tr.attn_prob(0, 2)(3, 2);
        const double p3 = tr.attn_prob(0, 3)(3, 2);
        const double sig = tr.final_ln_inv_std[3];

        // Exact per-token residual coefficients at END after layer 0.
        std::map<int, double> coef;
        for (int k = 0; k < n_rel; ++k)
            if (covered(s, k)) {
                coef[attr.at({s, k})] += p0 * kCompSubjA + (p2s / 0.5) * kCompMixA;
            }
        coef[dist[s]] += p0 * kCompSubjD;
        for (int s2 = 0; s2 < n_subj; ++s2)
            if (covered(s2, j))
                coef[attr.at({s2, j})] += p1 * kCompRelA + (p2r / 0.5) * kCompMixA;
        for (int k = 0; k < n_extra; ++k)
            coef[extra[j][k]] += p1 * kCompRelA + (p2r / 0.5) * kCompMixA;
        coef[gtok[j]] += p1 * kCompRelG + (p2r / 0.5) * kCompMixG;

        const double message = p3 * kCompMoverQ;
        double norm1 = kEmb * kEmb + kPos * kPos + message * message;
        for (const auto& [tok, c] : coef) norm1 += c * c;
        const double inv1 = 1.0 / std::sqrt(norm1 / cfg.d_model + kLnEps);
        const double preact =
            inv1 * message * (kCompPreact / (inv1_end_est * kCompMoverQ));
        const double mlp_scale = gelu(preact) / gelu_est;

        EntryExpectations ex;
        const int a_tok = attr.at({s, j});
        const ComponentId h0 = ComponentId::head(0, 0);
        const ComponentId h1 = ComponentId::head(0, 1);
        const ComponentId h2 = ComponentId::head(0, 2);
        const ComponentId h3 = ComponentId::head(0, 3);
        const ComponentId mlp1 = ComponentId::mlp(1);

        ex.dla.push_back({h0, std::nullopt, a_tok, p0 * kCompSubjA * sig});
        ex.dla.push_back({h0, std::nullopt, dist[s], p0 * kCompSubjD * sig});
        ex.dla.push_back({h0, Group::kSubject, a_tok, p0 * kCompSubjA * sig});
        ex.dla.push_back({h0, Group::kRelation, a_tok, 0.0});
        ex.dla.push_back({h0, std::nullopt, gtok[j], 0.0});

        ex.dla.push_back({h1, std::nullopt, a_tok, p1 * kCompRelA * sig});
        ex.dla.push_back({h1, std::nullopt, gtok[j], p1 * kCompRelG * sig});
        ex.dla.push_back({h1, Group::kRelation, a_tok, p1 * kCompRelA * sig});
        ex.dla.push_back({h1, Group::kSubject, a_tok, 0.0});
        ex.dla.push_back({h1, std::nullopt, dist[s], 0.0});

        ex.dla.push_back(
            {h2, std::nullopt, a_tok, (p2s + p2r) / 0.5 * kCompMixA * sig});
        ex.dla.push_back({h2, Group::kSubject, a_tok, (p2s / 0.5) * kCompMixA * sig});
        ex.dla.push_back({h2, Group::kRelation, a_tok, (p2r / 0.5) * kCompMixA * sig});
        ex.dla.push_back({h2, std::nullopt, gtok[j], (p2r / 0.5) * kCompMixG * sig});

        ex.dla.push_back({h3, std::nullopt, a_tok, 0.0});
        ex.dla.push_back({h3, std::nullopt, gtok[j], 0.0});

        ex.dla.push_back({mlp1, std::nullopt, a_tok, mlp_scale * kCompMlpA * sig});
        ex.dla.push_back({mlp1, std::nullopt, gtok[j], mlp_scale * kCompMlpG * sig});
        ex.dla.push_back({mlp1, std::nullopt, dist[s], 0.0});
        expect_component_zero_on(ex, ComponentId::mlp(0), a_tok);
        expect_component_zero_on(ex, ComponentId::embed(), a_tok);
        expect_component_zero_on(ex, ComponentId::bias(), a_tok);
        fx.expected.push_back(std::move(ex));
    }
    return fx;
}

// ---------------------------------------------------------------------------
// div6: single-token prompts, two heads and a bias. Each circuit, when its
// divisibility test fires, writes exactly +1 onto "true" (plus a 0.75 marker
// on its own digit token so the two circuits stay distinguishable); when it
// does not fire it writes an equal-norm junk direction, keeping the final-LN
// scale constant across inputs so the +1/+1.5 logits are exact.
// ---------------------------------------------------------------------------

constexpr double kDivMarker = 0.75;
constexpr double kDivFalseBias = 1.5;

Fixture build_div6(std::uint64_t seed, const ModelConfig* dims) {
    ModelConfig cfg{1, 2, 72, 8, 8, 26, 1, kLnEps, ResidualStyle::kParallel};
    if (dims != nullptr) cfg = *dims;
    const int n_numbers = 24;

    VocabBuilder vb;
    std::vector<int> num(n_numbers);
    for (int n = 0; n < n_numbers; ++n) num[n] = vb.add(cat(n));
    const int tok_true = vb.add("true");
    const int tok_false = vb.add("false");
    Vocab vocab(vb.tokens);

    Builder b(cfg, seed);
    std::vector<Vecd> e_n;
    for (int n = 0; n < n_numbers; ++n) e_n.push_back(b.dir());
    const Vecd u_true2 = b.dir(), u_true3 = b.dir();
    const Vecd u_m2 = b.dir(), u_m3 = b.dir();
    const Vecd junk2 = b.dir(), junk3 = b.dir();
    const Vecd pi0 = b.dir();

    for (int n = 0; n < n_numbers; ++n) b.embed_token(num[n], e_n[n]);
    b.embed_pos(0, pi0);
    // "true" reads the sum of the two circuits' private directions, so the
    // cross term between simultaneous writes vanishes and norms stay fixed.
    b.model.unembed.col(tok_true) = u_true2 + u_true3;
    b.unembed_token(num[2], u_m2);
    b.unembed_token(num[3], u_m3);

    // Calibrate q so that q * final_inv_std == 1 exactly. Each head always
    // writes norm q*sqrt(1 + marker^2), so ||z^L||^2 is input-independent.
    const double paysq = 1.0 + kDivMarker * kDivMarker;
    const double norm0 = kEmb * kEmb + kPos * kPos;
    const double q = std::sqrt((norm0 / cfg.d_model + kLnEps) /
                               (1.0 - 2.0 * paysq / cfg.d_model));
    const double w_raw = q / (b.inv0 * kEmb);

    for (int n = 0; n < n_numbers; ++n) {
        b.route(0, 0, n % 2 == 0 ? 0 : 1, e_n[n]);
        b.route(0, 1, n % 3 == 0 ? 0 : 1, e_n[n]);
    }
    b.channel_write(0, 0, 0, w_raw * (u_true2 + kDivMarker * u_m2));
    b.channel_write(0, 0, 1, w_raw * std::sqrt(paysq) * junk2);
    b.channel_write(0, 1, 0, w_raw * (u_true3 + kDivMarker * u_m3));
    b.channel_write(0, 1, 1, w_raw * std::sqrt(paysq) * junk3);

    Vecd b_u = Vecd::Zero(cfg.vocab_size);
    b_u[tok_false] = kDivFalseBias;
    b.model.unembed_bias = b_u;
    b.model.validate();

    Fixture fx;
    fx.spec = {FixtureName::kDiv6, seed, cfg, {}, {tok_true}};
    fx.model = std::move(b.model);
    fx.vocab = std::move(vocab);
    fx.roles["div2_head"] = ComponentId::head(0, 0);
    fx.roles["div3_head"] = ComponentId::head(0, 1);

    for (int n = 0; n < n_numbers; ++n) {
        const bool is_true = n % 6 == 0;
        fx.spec.planted_facts[num[n]] = is_true ? tok_true : tok_false;
        FactEntry e;
        e.subject = cat(n);
        e.relation_id = "div6";
        e.relation_text = "is divisible by 6";
        e.attribute = is_true ? "true" : "false";
        e.prompt = cat(n);
        e.prompt_tokens = {num[n]};
        e.spans = TokenGroupSpans::end_only();
        e.r_minus_a = {is_true ? "false" : "true"};
        fx.entries.push_back(finalize_entry(std::move(e), fx.vocab));
    }

    for (int n = 0; n < n_numbers; ++n) {
        const double fire2 = n % 2 == 0 ? 1.0 : 0.0;
        const double fire3 = n % 3 == 0 ? 1.0 : 0.0;
        EntryExpectations ex;
        const ComponentId h2 = ComponentId::head(0, 0);
        const ComponentId h3 = ComponentId::head(0, 1);
        ex.dla.push_back({h2, std::nullopt, tok_true, fire2});
        ex.dla.push_back({h2, std::nullopt, num[2], fire2 * kDivMarker});
        ex.dla.push_back({h2, std::nullopt, tok_false, 0.0});
        ex.dla.push_back({h3, std::nullopt, tok_true, fire3});
        ex.dla.push_back({h3, std::nullopt, num[3], fire3 * kDivMarker});
        ex.dla.push_back({h3, std::nullopt, tok_false, 0.0});
        ex.dla.push_back({ComponentId::bias(), std::nullopt, tok_false, kDivFalseBias});
        ex.dla.push_back({ComponentId::bias(), std::nullopt, tok_true, 0.0});
        expect_component_zero_on(ex, ComponentId::mlp(0), tok_true);
        expect_component_zero_on(ex, ComponentId::embed(), tok_true);
        ex.logit_diff_true_false = fire2 + fire3 - kDivFalseBias;
        fx.expected.push_back(std::move(ex));
    }
    return fx;
}

}  // namespace

std::string_view to_string(FixtureName name) {
    switch (name) {
        case FixtureName::kSubjectHead: return "subject_head";
        case FixtureName::kRelationHead: return "relation_head";
        case FixtureName::kPropagation: return "propagation";
        case FixtureName::kComposite: return "composite";
        case FixtureName::kDiv6: return "div6";
    }
    return "?";
}

FixtureName fixture_name_from_string(std::string_view s) {
    for (FixtureName n : all_fixture_names())
        if (to_string(n) == s) return n;
    throw std::invalid_argument(cat("unknown fixture '", s, "'"));
}

std::vector<FixtureName> all_fixture_names() {
    return {FixtureName::kSubjectHead, FixtureName::kRelationHead,
            FixtureName::kPropagation, FixtureName::kComposite, FixtureName::kDiv6};
}

Fixture build_fixture(FixtureName name, std::uint64_t seed,
                      const ModelConfig* dims_override) {
    switch (name) {
        case FixtureName::kSubjectHead: return build_subject_head(seed, dims_override);
        case FixtureName::kRelationHead:
            return build_relation_head(seed, dims_override);
        case FixtureName::kPropagation: return build_propagation(seed, dims_override);
        case FixtureName::kComposite: return build_composite(seed, dims_override);
        case FixtureName::kDiv6: return build_div6(seed, dims_override);
    }
    throw std::invalid_argument("unknown fixture");
}

void emit(const Fixture& fx, const std::filesystem::path& dir) {
    save_model(fx.model, fx.vocab, dir);
    save_dataset(fx.entries, dir / "dataset.jsonl");

    json roles = json::object();
    for (const auto& [name, c] : fx.roles) roles[name] = c.to_string();
    json entries = json::array();
    for (std::size_t i = 0; i < fx.expected.size(); ++i) {
        json recs = json::array();
        for (const auto& r : fx.expected[i].dla) {
            json rec = {{"component", r.component.to_string()},
                        {"token", r.token},
                        {"value", r.value}};
            if (r.source_group) rec["group"] = std::string(to_string(*r.source_group));
            recs.push_back(std::move(rec));
        }
        json e = {{"index", i}, {"dla", std::move(recs)}};
        if (fx.expected[i].logit_diff_true_false)
            e["logit_diff_true_false"] = *fx.expected[i].logit_diff_true_false;
        entries.push_back(std::move(e));
    }
    json doc = {{"fixture", std::string(to_string(fx.spec.name))},
                {"seed", fx.spec.seed},
                {"roles", std::move(roles)},
                {"entries", std::move(entries)}};
    std::ofstream f(dir / "expected.json");
    if (!f) throw std::runtime_error("cannot write expected.json");
    f << doc.dump(2) << "\n";
}

}  // namespace recall::fixtures
