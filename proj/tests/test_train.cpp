#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include "dtn/checkpoint.hpp"
#include "dtn/evaluation.hpp"
#include "dtn/train.hpp"

using namespace dtn;

namespace {

train::TrainConfig small_train_cfg() {
    train::TrainConfig c;
    c.model.vocab_size_src = 32;
    c.model.vocab_size_tgt = 32;
    c.model.d_model = 16;
    c.model.n_heads = 2;
    c.model.n_enc_layers = 1;
    c.model.n_dec_layers = 1;
    c.model.d_ffn = 24;
    c.model.max_len = 16;
    c.model.dropout_rate = 0.1;
    c.batch_tokens = 300;
    c.adam.warmup_steps = 50;
    c.seed = 3;
    return c;
}

std::vector<data::DomainCorpus> small_corpora(std::uint64_t seed) {
    auto vocab = data::Vocabulary::build(24, 4);
    data::GenParams gp;
    gp.seed = seed;
    gp.sizes = {40, 40, 10, 10};
    gp.min_len = 3;
    gp.max_len = 8;
    return data::generate_synthetic(vocab, gp);
}

bool params_equal(const model::ModelParams& a, const model::ModelParams& b) {
    if (a.size() != b.size()) return false;
    for (const auto& [name, t] : a) {
        auto it = b.find(name);
        if (it == b.end() || it->second.shape() != t.shape()) return false;
        if (std::memcmp(t.data().data(), it->second.data().data(),
                        t.size() * sizeof(double)) != 0)
            return false;
    }
    return true;
}

}  // namespace

TEST_CASE("config validation lists every problem") {
    auto c = small_train_cfg();
    c.max_steps = -1;
    c.lambda = 1.5;
    c.phase_b_per_a = 0;
    try {
        c.validate();
        FAIL("expected validation failure");
    } catch (const std::invalid_argument& e) {
        const std::string msg = e.what();
        CHECK(msg.find("max_steps") != std::string::npos);
        CHECK(msg.find("lambda") != std::string::npos);
        CHECK(msg.find("phase_b_per_a") != std::string::npos);
    }
    CHECK_NOTHROW(small_train_cfg().validate());
}

TEST_CASE("config survives a json round trip") {
    auto c = small_train_cfg();
    c.distill_word = true;
    c.discriminate = true;
    c.dtn_kind = transform::DtnKind::ffn;
    c.alpha = 0.55;
    c.seed = 42;
    c.log_path = "x.csv";
    auto d = train::config_from_json(train::config_to_json(c));
    CHECK(d.model == c.model);
    CHECK(d.alpha == c.alpha);
    CHECK(d.seed == c.seed);
    CHECK(d.distill_word == c.distill_word);
    CHECK(d.discriminate == c.discriminate);
    CHECK(d.dtn_kind == c.dtn_kind);
    CHECK(d.log_path == c.log_path);
    CHECK_THROWS(train::config_from_json("{not json"));
}

TEST_CASE("dotted overrides reach nested fields") {
    auto c = small_train_cfg();
    train::apply_override(c, "model.d_model", "48");
    train::apply_override(c, "adam.lr_scale", "1.25");
    train::apply_override(c, "discriminate", "true");
    train::apply_override(c, "dtn_kind", "ffn");
    train::apply_override(c, "seed", "99");
    CHECK(c.model.d_model == 48);
    CHECK(c.adam.lr_scale == 1.25);
    CHECK(c.discriminate);
    CHECK(c.dtn_kind == transform::DtnKind::ffn);
    CHECK(c.seed == 99);
    CHECK_THROWS(train::apply_override(c, "no.such.key", "1"));
    CHECK_THROWS(train::apply_override(c, "discriminate", "maybe"));
}

TEST_CASE("learning rate warms up then decays") {
    optim::AdamConfig a;
    a.warmup_steps = 100;
    CHECK(optim::inverse_sqrt_lr(a, 50) < optim::inverse_sqrt_lr(a, 100));
    CHECK(optim::inverse_sqrt_lr(a, 100) ==
          doctest::Approx(optim::inverse_sqrt_lr(a, 100)));
    CHECK(optim::inverse_sqrt_lr(a, 400) < optim::inverse_sqrt_lr(a, 100));
    // linear during warmup
    CHECK(optim::inverse_sqrt_lr(a, 50) ==
          doctest::Approx(0.5 * optim::inverse_sqrt_lr(a, 100)).epsilon(1e-12));
    CHECK_THROWS(optim::inverse_sqrt_lr(a, 0));
}

TEST_CASE("adam updates only the active group") {
    model::ModelParams p;
    p["theta.w"] = ag::Tensor::full({4}, 1.0, true);
    p["adv.w"] = ag::Tensor::full({4}, 1.0, true);
    for (auto& [name, t] : p) t.grad().assign(4, 0.5);
    optim::Adam adam({});
    adam.step(p, [](const std::string& n) { return n.rfind("adv.", 0) != 0; });
    for (double v : p.at("adv.w").data()) CHECK(v == 1.0);
    for (double v : p.at("theta.w").data()) CHECK(v != 1.0);
    // grads of the active group were consumed, frozen group's retained
    for (double g : p.at("theta.w").grad()) CHECK(g == 0.0);
    for (double g : p.at("adv.w").grad()) CHECK(g == 0.5);
}

TEST_CASE("training log csv contract") {
    std::vector<train::LogRow> rows = {{1, 'A', 2, 1.5, 0.25, -0.125, 0.0},
                                       {1, 'B', 0, 0.0, 0.0, 0.0, 1.375}};
    const std::string path = "log_test.csv";
    train::write_training_log(rows, path);
    std::ifstream in(path);
    std::string header, l1, l2;
    std::getline(in, header);
    std::getline(in, l1);
    std::getline(in, l2);
    CHECK(header == "step,phase,domain,nll_or_kd,specific_cls,adv_entropy,adv_cls");
    CHECK(l1 == "1,A,2,1.5,0.25,-0.125,0");
    CHECK(l2 == "1,B,0,0,0,0,1.375");
    std::remove(path.c_str());
}

TEST_CASE("checkpoints round-trip bit-exactly") {
    auto cfg = small_train_cfg().model;
    auto params = model::init_nmt_params(cfg, 5);
    transform::init_dtn(params, cfg, 2, transform::DtnKind::attention, 5);
    const std::string path = "ckpt_test.json";
    ckpt::save_checkpoint(path, cfg, params);
    auto loaded = ckpt::load_checkpoint(path);
    CHECK(loaded.config == cfg);
    CHECK(params_equal(loaded.params, params));
    const auto h1 = ckpt::checkpoint_hash(path);
    ckpt::save_checkpoint(path, cfg, params);
    CHECK(ckpt::checkpoint_hash(path) == h1);
    params.at("src_embed").data()[0] += 1e-12;
    ckpt::save_checkpoint(path, cfg, params);
    CHECK(ckpt::checkpoint_hash(path) != h1);
    std::remove(path.c_str());
}

TEST_CASE("checkpoint loading rejects bad files") {
    const std::string path = "ckpt_bad.json";
    {
        std::ofstream out(path);
        out << "{\"format\":\"other\"}";
    }
    CHECK_THROWS(ckpt::load_checkpoint(path));
    {
        std::ofstream out(path);
        out << "not json at all";
    }
    CHECK_THROWS(ckpt::load_checkpoint(path));
    {
        std::ofstream out(path);
        out << R"({"format":"dtn-ckpt-1","config":{"vocab_size_src":8,"vocab_size_tgt":8,
            "d_model":4,"n_heads":1,"n_enc_layers":1,"n_dec_layers":1,"d_ffn":8,
            "max_len":8,"dropout_rate":0.0,"pad_id":0,"bos_id":1,"eos_id":2},
            "params":{"w":{"shape":[2,2],"data":[1.0,2.0,3.0]}}})";
    }
    CHECK_THROWS(ckpt::load_checkpoint(path));
    CHECK_THROWS(ckpt::load_checkpoint("no_such_file.json"));
    std::remove(path.c_str());
}

TEST_CASE("baseline training is deterministic") {
    auto cfg = small_train_cfg();
    cfg.max_steps = 20;
    auto corpora = small_corpora(31);
    auto a = train::train_baseline(cfg, corpora);
    auto b = train::train_baseline(cfg, corpora);
    CHECK(params_equal(a.params, b.params));
    REQUIRE(a.log.size() == 20);
    CHECK(a.log.back().nll_or_kd == b.log.back().nll_or_kd);
    CHECK_THROWS(train::train_baseline(cfg, {}));
}

TEST_CASE("baseline halves the mixed nll") {
    auto cfg = small_train_cfg();
    cfg.max_steps = 250;
    auto corpora = small_corpora(32);
    auto res = train::train_baseline(cfg, corpora);
    double head = 0, tail = 0;
    for (int i = 0; i < 10; ++i) {
        head += res.log[i].nll_or_kd;
        tail += res.log[res.log.size() - 1 - i].nll_or_kd;
    }
    CHECK(tail / 10 < 0.5 * (head / 10));
}

TEST_CASE("a copy task trains to high bleu") {
    auto cfg = small_train_cfg();
    cfg.model.d_model = 32;
    cfg.model.d_ffn = 64;
    cfg.max_steps = 500;
    cfg.batch_tokens = 600;
    std::mt19937_64 rng(33);
    std::uniform_int_distribution<int> tok(8, 31);
    data::DomainCorpus corpus, held_out;
    for (int i = 0; i < 330; ++i) {
        std::vector<int> s(3 + i % 6);
        for (auto& x : s) x = tok(rng);
        (i < 300 ? corpus : held_out).pairs.emplace_back(s, s);
    }
    auto res = train::train_baseline(cfg, {corpus});
    eval::Sentences refs;
    for (const auto& p : held_out.pairs) refs.push_back(p.second);
    eval::DecodeOptions opt;
    auto hyps = eval::decode_corpus(cfg.model, res.params, held_out, opt);
    CHECK(eval::bleu(hyps, refs) > 90.0);
}

TEST_CASE("zero fine-tune steps leave the teacher at the base") {
    auto cfg = small_train_cfg();
    cfg.max_steps = 0;
    auto corpora = small_corpora(34);
    auto base = model::init_nmt_params(cfg.model, 6);
    auto t = train::finetune_teacher(cfg, base, corpora[1]);
    CHECK(params_equal(t.params, base));
    CHECK_THROWS(train::finetune_teacher(cfg, base, data::DomainCorpus{}));
}

TEST_CASE("domain control requires tags and runs on tagged sources") {
    auto cfg = small_train_cfg();
    cfg.max_steps = 5;
    auto corpora = small_corpora(35);
    auto untagged_vocab = data::Vocabulary::build(24, 0);
    CHECK_THROWS(train::train_domain_control(cfg, corpora, untagged_vocab));
    auto vocab = data::Vocabulary::build(24, 4);
    auto res = train::train_domain_control(cfg, corpora, vocab);
    CHECK(res.log.size() == 5);
    for (const auto& r : res.log) CHECK(std::isfinite(r.nll_or_kd));
}

TEST_CASE("unified training obeys the phase freeze contracts") {
    auto cfg = small_train_cfg();
    cfg.max_steps = 12;
    cfg.discriminate = true;
    auto corpora = small_corpora(36);
    auto base = model::init_nmt_params(cfg.model, 7);

    auto params = model::clone_params(base);
    transform::init_dtn(params, cfg.model, 4, cfg.dtn_kind, cfg.seed);
    supervision::init_classifiers(params, cfg.model, 4, cfg.seed);
    train::TrainState st(cfg);

    model::ModelParams snapshot = model::clone_params(params);
    int violations = 0, a_steps = 0, b_steps = 0;
    auto observer = [&](char phase, const model::ModelParams& p) {
        for (const auto& [name, t] : p) {
            const bool is_adv = name.rfind("adv.", 0) == 0;
            const bool must_freeze = phase == 'A' ? is_adv : !is_adv;
            if (!must_freeze) continue;
            if (std::memcmp(t.data().data(), snapshot.at(name).data().data(),
                            t.size() * sizeof(double)) != 0)
                ++violations;
        }
        snapshot = model::clone_params(p);
        (phase == 'A' ? a_steps : b_steps) += 1;
    };
    train::unified_steps(cfg, corpora, nullptr, params, st, cfg.max_steps, observer);
    CHECK(violations == 0);
    CHECK(a_steps == 12);
    CHECK(b_steps == 12);

    int b_rows = 0;
    for (const auto& r : st.log)
        if (r.phase == 'B') {
            ++b_rows;
            CHECK(r.adv_cls > 0.0);
        }
    CHECK(b_rows == 12);
}

TEST_CASE("unified training resumes bit-exactly") {
    auto cfg = small_train_cfg();
    cfg.max_steps = 16;
    cfg.discriminate = true;
    auto corpora = small_corpora(37);
    auto base = model::init_nmt_params(cfg.model, 8);

    auto full = train::train_unified(cfg, base, corpora, nullptr);

    auto params = model::clone_params(base);
    transform::init_dtn(params, cfg.model, 4, cfg.dtn_kind, cfg.seed);
    supervision::init_classifiers(params, cfg.model, 4, cfg.seed);
    train::TrainState st(cfg);
    train::unified_steps(cfg, corpora, nullptr, params, st, 8);
    const std::string frozen = st.serialize();

    train::TrainState st2(cfg);
    st2.restore(frozen);
    train::unified_steps(cfg, corpora, nullptr, params, st2, 16);
    CHECK(params_equal(params, full.params));
}

TEST_CASE("unified training validates its inputs") {
    auto cfg = small_train_cfg();
    cfg.max_steps = 1;
    auto corpora = small_corpora(38);
    auto base = model::init_nmt_params(cfg.model, 9);

    cfg.distill_word = true;
    CHECK_THROWS(train::train_unified(cfg, base, corpora, nullptr));
    supervision::TeacherSet partial;
    partial.teachers[0] = model::clone_params(base);
    CHECK_THROWS(train::train_unified(cfg, base, corpora, &partial));
    cfg.distill_word = false;

    // mismatched DTN bank
    auto params = model::clone_params(base);
    transform::init_dtn(params, cfg.model, 2, cfg.dtn_kind, cfg.seed);
    train::TrainState st(cfg);
    CHECK_THROWS(train::unified_steps(cfg, corpora, nullptr, params, st, 1));
}

TEST_CASE("distillation runs against frozen teachers") {
    auto cfg = small_train_cfg();
    cfg.max_steps = 4;
    cfg.distill_word = true;
    cfg.distill_seq = true;
    auto corpora = small_corpora(39);
    auto base = model::init_nmt_params(cfg.model, 10);
    supervision::TeacherSet teachers;
    for (int d = 0; d < 4; ++d) teachers.teachers[d] = model::clone_params(base);
    const auto before = model::clone_params(teachers.teachers[2]);
    auto res = train::train_unified(cfg, base, corpora, &teachers);
    CHECK(res.log.size() == 4);
    for (const auto& r : res.log) CHECK(std::isfinite(r.nll_or_kd));
    CHECK(params_equal(teachers.teachers[2], before));
}
