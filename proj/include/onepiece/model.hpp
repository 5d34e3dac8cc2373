#pragma once
// The full parameter set: embedding tables, shared/entity projections,
// positional tables, encoder layers, reasoning position embeddings, and one
// scoring head per task. Parameters live in a ParamStore; per-batch they are
// bound onto a tape, and checkpoints serialize the store with a
// self-describing header.

#include <cstdint>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "onepiece/backbone.hpp"
#include "onepiece/config.hpp"
#include "onepiece/context.hpp"
#include "onepiece/funnelgen.hpp"
#include "onepiece/objectives.hpp"
#include "onepiece/optim.hpp"

namespace onepiece {

struct ModelConfig {
    int dim = 16;
    int layers = 1;
    int heads = 2;
    int ff_mult = 4;
    int feature_dim = 8;
    int text_dim = 16;
    int max_ih = 16;
    int max_pa = 30;
    int max_steps = 4;
    double init_sigma = 0.1;
    VocabSpec vocab;

    int ff() const { return ff_mult * dim; }

    static ModelConfig from_config(const Config& c, int text_dim) {
        ModelConfig m;
        m.dim = static_cast<int>(c.get_int("model.dim"));
        m.layers = static_cast<int>(c.get_int("model.layers"));
        m.heads = static_cast<int>(c.get_int("model.heads"));
        m.ff_mult = static_cast<int>(c.get_int("model.ff_mult"));
        m.feature_dim = static_cast<int>(c.get_int("model.feature_dim"));
        m.text_dim = text_dim;
        m.max_ih = static_cast<int>(c.get_int("model.max_ih"));
        m.max_pa = static_cast<int>(c.get_int("model.max_pa"));
        m.max_steps = static_cast<int>(c.get_int("model.max_steps"));
        m.init_sigma = c.get_double("model.init_sigma");
        m.vocab.items = static_cast<int>(c.get_int("model.vocab_items"));
        m.vocab.categories = static_cast<int>(c.get_int("model.vocab_categories"));
        m.vocab.shops = static_cast<int>(c.get_int("model.vocab_shops"));
        m.vocab.price = static_cast<int>(c.get_int("model.vocab_price"));
        m.vocab.pop = static_cast<int>(c.get_int("model.vocab_pop"));
        m.vocab.users = static_cast<int>(c.get_int("model.vocab_users"));
        m.vocab.age = static_cast<int>(c.get_int("model.vocab_age"));
        m.vocab.locations = static_cast<int>(c.get_int("model.vocab_locations"));
        m.vocab.queries = static_cast<int>(c.get_int("model.vocab_queries"));
        m.validate();
        return m;
    }

    void validate() const {
        if (dim < 1 || heads < 1 || dim % heads != 0) {
            throw std::invalid_argument("ModelConfig: dim must be a positive multiple of heads");
        }
        if (layers < 0 || feature_dim < 1 || max_steps < 1) {
            throw std::invalid_argument("ModelConfig: bad shape");
        }
    }

    nlohmann::ordered_json to_json() const {
        return {{"dim", dim},
                {"layers", layers},
                {"heads", heads},
                {"ff_mult", ff_mult},
                {"feature_dim", feature_dim},
                {"text_dim", text_dim},
                {"max_ih", max_ih},
                {"max_pa", max_pa},
                {"max_steps", max_steps},
                {"init_sigma", init_sigma},
                {"vocab_items", vocab.items},
                {"vocab_categories", vocab.categories},
                {"vocab_shops", vocab.shops},
                {"vocab_price", vocab.price},
                {"vocab_pop", vocab.pop},
                {"vocab_users", vocab.users},
                {"vocab_age", vocab.age},
                {"vocab_locations", vocab.locations},
                {"vocab_queries", vocab.queries}};
    }

    static ModelConfig from_json(const nlohmann::json& j) {
        ModelConfig m;
        m.dim = j.at("dim");
        m.layers = j.at("layers");
        m.heads = j.at("heads");
        m.ff_mult = j.at("ff_mult");
        m.feature_dim = j.at("feature_dim");
        m.text_dim = j.at("text_dim");
        m.max_ih = j.at("max_ih");
        m.max_pa = j.at("max_pa");
        m.max_steps = j.at("max_steps");
        m.init_sigma = j.at("init_sigma");
        m.vocab.items = j.at("vocab_items");
        m.vocab.categories = j.at("vocab_categories");
        m.vocab.shops = j.at("vocab_shops");
        m.vocab.price = j.at("vocab_price");
        m.vocab.pop = j.at("vocab_pop");
        m.vocab.users = j.at("vocab_users");
        m.vocab.age = j.at("vocab_age");
        m.vocab.locations = j.at("vocab_locations");
        m.vocab.queries = j.at("vocab_queries");
        m.validate();
        return m;
    }
};

inline const std::vector<Task>& all_tasks() {
    static const std::vector<Task> tasks{Task::impression, Task::click, Task::add_to_cart,
                                         Task::order};
    return tasks;
}

struct OnePieceModel {
    ModelConfig cfg;
    ParamStore params;

    void init(std::uint64_t seed) {
        Rng rng(derive_seed(seed, 0x9a17));
        build_params(rng);
    }

private:

    void add_gauss(Rng& rng, const std::string& name, std::vector<int> shape, double sigma) {
        params.add(name, shape, gaussian_init(Tape::numel_of(shape), sigma, rng));
    }
    void add_const(const std::string& name, std::vector<int> shape, double v) {
        params.add(name, shape, std::vector<double>(Tape::numel_of(shape), v));
    }
    void add_xavier(Rng& rng, const std::string& name, int rows, int cols) {
        double sigma = 1.0 / std::sqrt(static_cast<double>(rows));
        params.add(name, {rows, cols}, gaussian_init(static_cast<std::size_t>(rows) * cols, sigma, rng));
    }

    void build_params(Rng& rng) {
        int d = cfg.dim, f = cfg.feature_dim;
        double s = cfg.init_sigma;
        add_gauss(rng, "emb.item_id", {cfg.vocab.items, f}, s);
        add_gauss(rng, "emb.item_cat", {cfg.vocab.categories, f}, s);
        add_gauss(rng, "emb.item_shop", {cfg.vocab.shops, f}, s);
        add_gauss(rng, "emb.item_price", {cfg.vocab.price, f}, s);
        add_gauss(rng, "emb.item_pop", {cfg.vocab.pop, f}, s);
        add_gauss(rng, "emb.user_id", {cfg.vocab.users, f}, s);
        add_gauss(rng, "emb.user_age", {cfg.vocab.age, f}, s);
        add_gauss(rng, "emb.user_loc", {cfg.vocab.locations, f}, s);
        add_gauss(rng, "emb.query_id", {cfg.vocab.queries, f}, s);
        add_gauss(rng, "emb.query_pop", {cfg.vocab.pop, f}, s);
        add_xavier(rng, "proj.shared.w", 5 * f, d);
        add_const("proj.shared.b", {d}, 0.0);
        add_xavier(rng, "proj.cand.w", 5 * f, d);
        add_const("proj.cand.b", {d}, 0.0);
        add_xavier(rng, "proj.user.w", 3 * f, d);
        add_const("proj.user.b", {d}, 0.0);
        add_xavier(rng, "proj.query.w", 2 * f + cfg.text_dim, d);
        add_const("proj.query.b", {d}, 0.0);
        add_gauss(rng, "pos.ih", {cfg.max_ih, d}, s);
        add_gauss(rng, "pos.pa", {cfg.max_pa, d}, s);
        add_gauss(rng, "pos.user", {1, d}, s);
        add_gauss(rng, "pos.query", {1, d}, s);
        add_gauss(rng, "tok.bos", {1, d}, s);
        add_gauss(rng, "tok.eos", {1, d}, s);
        for (int l = 0; l < cfg.layers; ++l) {
            std::string pre = "enc." + std::to_string(l) + ".";
            add_xavier(rng, pre + "wq", d, d);
            add_const(pre + "bq", {d}, 0.0);
            add_xavier(rng, pre + "wk", d, d);
            add_const(pre + "bk", {d}, 0.0);
            add_xavier(rng, pre + "wv", d, d);
            add_const(pre + "bv", {d}, 0.0);
            add_xavier(rng, pre + "wo", d, d);
            add_const(pre + "bo", {d}, 0.0);
            add_xavier(rng, pre + "w1", d, cfg.ff());
            add_const(pre + "b1", {cfg.ff()}, 0.0);
            add_xavier(rng, pre + "w2", cfg.ff(), d);
            add_const(pre + "b2", {d}, 0.0);
            add_const(pre + "ln1g", {d}, 1.0);
            add_const(pre + "ln1b", {d}, 0.0);
            add_const(pre + "ln2g", {d}, 1.0);
            add_const(pre + "ln2b", {d}, 0.0);
        }
        add_gauss(rng, "rpe", {cfg.max_steps, d}, s);
        for (Task t : all_tasks()) {
            std::string pre = std::string("head.") + task_name(t) + ".";
            add_xavier(rng, pre + "w1", d, d);
            add_const(pre + "b1", {d}, 0.0);
            add_xavier(rng, pre + "w2", d, 1);
            add_const(pre + "b2", {1}, 0.0);
        }
    }
};

// All parameters bound as leaves on one tape.
struct BoundModel {
    EmbeddingTables tables;
    EncoderParams enc;
    Tensor rpe;
    std::map<Task, HeadParams> heads;
};

inline BoundModel bind_model(Tape& tape, OnePieceModel& model, bool needs_grad,
                             Binding* binding = nullptr) {
    auto bp = [&](const std::string& name) {
        return bind_param(tape, model.params, name, needs_grad, binding);
    };
    BoundModel b;
    EmbeddingTables& t = b.tables;
    t.dim = model.cfg.dim;
    t.text_dim = model.cfg.text_dim;
    t.item_id = bp("emb.item_id");
    t.item_cat = bp("emb.item_cat");
    t.item_shop = bp("emb.item_shop");
    t.item_price = bp("emb.item_price");
    t.item_pop = bp("emb.item_pop");
    t.user_id = bp("emb.user_id");
    t.user_age = bp("emb.user_age");
    t.user_loc = bp("emb.user_loc");
    t.query_id = bp("emb.query_id");
    t.query_pop = bp("emb.query_pop");
    t.proj_shared_w = bp("proj.shared.w");
    t.proj_shared_b = bp("proj.shared.b");
    t.proj_cand_w = bp("proj.cand.w");
    t.proj_cand_b = bp("proj.cand.b");
    t.proj_user_w = bp("proj.user.w");
    t.proj_user_b = bp("proj.user.b");
    t.proj_query_w = bp("proj.query.w");
    t.proj_query_b = bp("proj.query.b");
    t.pos_ih = bp("pos.ih");
    t.pos_pa = bp("pos.pa");
    t.pos_user = bp("pos.user");
    t.pos_query = bp("pos.query");
    t.bos = bp("tok.bos");
    t.eos = bp("tok.eos");
    b.enc.dim = model.cfg.dim;
    b.enc.heads = model.cfg.heads;
    b.enc.ff = model.cfg.ff();
    for (int l = 0; l < model.cfg.layers; ++l) {
        std::string pre = "enc." + std::to_string(l) + ".";
        LayerParams lp;
        lp.wq = bp(pre + "wq");
        lp.bq = bp(pre + "bq");
        lp.wk = bp(pre + "wk");
        lp.bk = bp(pre + "bk");
        lp.wv = bp(pre + "wv");
        lp.bv = bp(pre + "bv");
        lp.wo = bp(pre + "wo");
        lp.bo = bp(pre + "bo");
        lp.w1 = bp(pre + "w1");
        lp.b1 = bp(pre + "b1");
        lp.w2 = bp(pre + "w2");
        lp.b2 = bp(pre + "b2");
        lp.ln1_g = bp(pre + "ln1g");
        lp.ln1_b = bp(pre + "ln1b");
        lp.ln2_g = bp(pre + "ln2g");
        lp.ln2_b = bp(pre + "ln2b");
        b.enc.layers.push_back(lp);
    }
    b.rpe = bp("rpe");
    for (Task t2 : all_tasks()) {
        std::string pre = std::string("head.") + task_name(t2) + ".";
        HeadParams h;
        h.w1 = bp(pre + "w1");
        h.b1 = bp(pre + "b1");
        h.w2 = bp(pre + "w2");  // d x 1, consumed as a flat vector
        h.b2 = bp(pre + "b2");
        b.heads[t2] = h;
    }
    return b;
}

// ---------------------------------------------------------------------------
// Dataset record -> feature hashing
// ---------------------------------------------------------------------------

inline ItemFeatures item_features(const CatalogItem& it, const VocabSpec& v) {
    return hash_item(static_cast<std::uint64_t>(it.id), static_cast<std::uint64_t>(it.category),
                     static_cast<std::uint64_t>(it.shop), it.price_bucket, it.pop_bucket, v);
}

inline UserFeatures user_features(const CatalogUser& u, const VocabSpec& v) {
    return hash_user(static_cast<std::uint64_t>(u.id), u.age_bucket,
                     static_cast<std::uint64_t>(u.location), v);
}

inline QueryFeatures query_features(const CatalogQuery& q, const VocabSpec& v) {
    return hash_query(static_cast<std::uint64_t>(q.id), q.text, q.pop_bucket, v);
}

// ---------------------------------------------------------------------------
// Checkpoints: "onepiece-checkpoint v1" + JSON header + raw doubles
// ---------------------------------------------------------------------------

inline void save_checkpoint(const OnePieceModel& model, const std::string& path,
                            const std::map<std::string, std::string>& meta = {}) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
    nlohmann::ordered_json header;
    header["model"] = model.cfg.to_json();
    header["meta"] = meta;
    nlohmann::ordered_json entries = nlohmann::ordered_json::array();
    for (const auto& [name, e] : model.params.entries()) {
        entries.push_back({{"name", name}, {"shape", e.shape}});
    }
    header["entries"] = entries;
    std::string h = header.dump();
    out << "onepiece-checkpoint v1\n" << h.size() << "\n" << h;
    for (const auto& [name, e] : model.params.entries()) {
        out.write(reinterpret_cast<const char*>(e.value.data()),
                  static_cast<std::streamsize>(e.value.size() * sizeof(double)));
    }
}

inline OnePieceModel load_checkpoint(const std::string& path,
                                     std::map<std::string, std::string>* meta = nullptr) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
    std::string magic;
    std::getline(in, magic);
    if (magic != "onepiece-checkpoint v1") {
        throw std::runtime_error("not a v1 checkpoint: " + path);
    }
    std::string lenline;
    std::getline(in, lenline);
    std::size_t hlen = std::stoull(lenline);
    std::string h(hlen, '\0');
    in.read(h.data(), static_cast<std::streamsize>(hlen));
    nlohmann::json header = nlohmann::json::parse(h);
    OnePieceModel model;
    model.cfg = ModelConfig::from_json(header.at("model"));
    if (meta) {
        for (const auto& [k, v] : header.at("meta").items()) (*meta)[k] = v.get<std::string>();
    }
    for (const auto& e : header.at("entries")) {
        std::vector<int> shape = e.at("shape").get<std::vector<int>>();
        std::size_t n = Tape::numel_of(shape);
        std::vector<double> values(n);
        in.read(reinterpret_cast<char*>(values.data()),
                static_cast<std::streamsize>(n * sizeof(double)));
        if (!in) throw std::runtime_error("truncated checkpoint: " + path);
        model.params.add(e.at("name").get<std::string>(), std::move(shape), std::move(values));
    }
    return model;
}

}  // namespace onepiece
