#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "dtn/checkpoint.hpp"
#include "dtn/evaluation.hpp"
#include "dtn/stats.hpp"
#include "dtn/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace dtn;

namespace {

std::string slurp(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read " + path);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

void spit(const std::string& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << text;
    if (!out) throw std::runtime_error("write failure on " + path);
}

std::string file_hash(const std::string& path) {
    std::ostringstream os;
    os << std::hex << stats::fnv1a_file(path);
    return os.str();
}

// defaults < config file < --set overrides
train::TrainConfig resolve_config(const std::string& config_path,
                                  const std::vector<std::string>& overrides) {
    train::TrainConfig cfg;
    if (!config_path.empty()) cfg = train::config_from_json(slurp(config_path));
    for (const auto& kv : overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("override '" + kv + "' is not key=value");
        train::apply_override(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    }
    return cfg;
}

struct Dataset {
    data::Vocabulary vocab;
    std::vector<data::DomainCorpus> train;
    std::vector<data::DomainCorpus> test;
    json meta;
};

Dataset load_dataset(const std::string& dir) {
    Dataset ds;
    ds.meta = json::parse(slurp(dir + "/dataset.json"));
    const int n = ds.meta.at("n_domains").get<int>();
    const int alphabet = ds.meta.at("alphabet_size").get<int>();
    ds.vocab = data::Vocabulary::build(alphabet, n);
    auto names = data::load_manifest(dir + "/manifest.txt");
    if (static_cast<int>(names.size()) != n)
        throw std::runtime_error("manifest lists " + std::to_string(names.size()) +
                                 " domains, dataset.json says " + std::to_string(n));
    for (int d = 0; d < n; ++d) {
        ds.train.push_back(
            data::load_corpus(dir + "/train/" + names[d] + ".tsv", ds.vocab, d));
        ds.test.push_back(
            data::load_corpus(dir + "/test/" + names[d] + ".tsv", ds.vocab, d));
        if (ds.meta.contains("rules")) {
            ds.train.back().rule_name = ds.meta["rules"].at(d).get<std::string>();
            ds.test.back().rule_name = ds.train.back().rule_name;
        }
    }
    return ds;
}

// every run drops a manifest with the resolved inputs and artifact hashes
void write_manifest(const std::string& out_dir, const std::string& command,
                    const json& config, const json& inputs,
                    const std::vector<std::string>& artifacts) {
    json m;
    m["command"] = command;
    m["config"] = config;
    m["inputs"] = inputs;
    json outs = json::object();
    for (const auto& a : artifacts) outs[fs::path(a).filename().string()] = file_hash(a);
    m["outputs"] = outs;
    spit(out_dir + "/manifest.json", m.dump(2) + "\n");
}

void fill_vocab_sizes(train::TrainConfig& cfg, const Dataset& ds) {
    if (cfg.model.vocab_size_src == 0) cfg.model.vocab_size_src = ds.vocab.size();
    if (cfg.model.vocab_size_tgt == 0) cfg.model.vocab_size_tgt = ds.vocab.size();
}

int n_teacher_files(const std::string& dir, int n) {
    int found = 0;
    for (int d = 0; d < n; ++d)
        if (fs::exists(dir + "/teacher_d" + std::to_string(d) + ".json")) ++found;
    return found;
}

supervision::TeacherSet load_teachers(const std::string& dir, int n) {
    supervision::TeacherSet ts;
    for (int d = 0; d < n; ++d) {
        const std::string path = dir + "/teacher_d" + std::to_string(d) + ".json";
        ts.teachers[d] = ckpt::load_checkpoint(path).params;
    }
    return ts;
}

// per-domain BLEU of a checkpoint; routing decided by the checkpoint contents
std::vector<double> score_per_domain(const ckpt::Checkpoint& ck, const Dataset& ds,
                                     int batch_tokens, bool domain_tags) {
    std::vector<double> out;
    for (std::size_t d = 0; d < ds.test.size(); ++d) {
        eval::DecodeOptions opt;
        opt.batch_tokens = batch_tokens;
        if (transform::has_dtn(ck.params)) opt.dtn_domain = static_cast<int>(d);
        if (domain_tags) opt.prepend_tag = ds.vocab.domain_tag(static_cast<int>(d));
        eval::Sentences refs;
        for (const auto& p : ds.test[d].pairs) refs.push_back(p.second);
        out.push_back(
            eval::bleu(eval::decode_corpus(ck.config, ck.params, ds.test[d], opt), refs));
    }
    return out;
}

std::vector<std::string> domain_names(const Dataset& ds) {
    std::vector<std::string> names;
    for (const auto& c : ds.train)
        names.push_back("d" + std::to_string(c.domain) + "(" + c.rule_name + ")");
    return names;
}

int run_cli(int argc, char** argv) {
    CLI::App app{"Multi-domain translation testbed with domain transformation "
                 "networks"};
    app.require_subcommand(1);

    std::string config_path, data_dir, out_dir, base_path, ckpt_path, teachers_dir;
    std::string reference_path, site = "both", reprs_out;
    std::vector<std::string> overrides;
    std::uint64_t gen_seed = 7, eval_seed = 1;
    std::vector<int> gen_sizes = {2000, 2000, 500, 500};
    int gen_min_len = 3, gen_max_len = 12, gen_alphabet = 24, gen_test_size = 200;
    int bootstrap_n = 1000;
    bool domain_tags = false;

    auto add_common = [&](CLI::App* sub, bool needs_data, bool needs_out) {
        sub->add_option("--config", config_path, "JSON config file");
        sub->add_option("--set", overrides, "config override key=value")
            ->type_name("KEY=VAL");
        auto* d = sub->add_option("--data", data_dir, "dataset directory");
        auto* o = sub->add_option("--out", out_dir, "output directory");
        if (needs_data) d->required();
        if (needs_out) o->required();
    };

    auto* gen = app.add_subcommand("gen-data", "generate the synthetic corpus");
    gen->add_option("--seed", gen_seed, "generation seed");
    gen->add_option("--sizes", gen_sizes, "training pairs per domain");
    gen->add_option("--min-len", gen_min_len, "minimum source length");
    gen->add_option("--max-len", gen_max_len, "maximum source length");
    gen->add_option("--alphabet", gen_alphabet, "alphabet size");
    gen->add_option("--test-size", gen_test_size, "held-out pairs per domain");
    gen->add_option("--out", out_dir, "output directory")->required();

    auto* tb = app.add_subcommand("train-baseline", "train the mixed-domain baseline");
    add_common(tb, true, true);

    auto* ft = app.add_subcommand("finetune-teachers",
                                  "fine-tune one teacher per domain from a base");
    add_common(ft, true, true);
    ft->add_option("--base", base_path, "base checkpoint")->required();

    auto* dc = app.add_subcommand("train-domain-control",
                                  "train the domain-tag baseline");
    add_common(dc, true, true);

    auto* tu = app.add_subcommand("train-unified",
                                  "train the unified model with DTNs");
    add_common(tu, true, true);
    tu->add_option("--base", base_path, "base checkpoint")->required();
    tu->add_option("--teachers", teachers_dir, "teacher checkpoint directory");

    auto* ev = app.add_subcommand("evaluate", "score a checkpoint on the test sets");
    add_common(ev, true, true);
    ev->add_option("--ckpt", ckpt_path, "checkpoint to score")->required();
    ev->add_option("--reference", reference_path, "baseline checkpoint for deltas");
    ev->add_option("--bootstrap", bootstrap_n, "bootstrap resamples");
    ev->add_option("--seed", eval_seed, "bootstrap seed");
    ev->add_flag("--domain-tags", domain_tags, "prepend test-domain tags to sources");

    auto* cm = app.add_subcommand("cross-matrix",
                                  "BLEU of every DTN on every domain");
    add_common(cm, true, true);
    cm->add_option("--ckpt", ckpt_path, "unified checkpoint")->required();

    auto* pr = app.add_subcommand("probe",
                                  "domain-probe accuracy of frozen representations");
    add_common(pr, true, true);
    pr->add_option("--ckpt", ckpt_path, "checkpoint")->required();
    pr->add_option("--site", site, "encoder_out, dtn_out, or both");
    pr->add_option("--seed", eval_seed, "probe seed");

    auto* ex = app.add_subcommand("export-reprs",
                                  "export pooled representations as CSV");
    add_common(ex, true, true);
    ex->add_option("--ckpt", ckpt_path, "checkpoint")->required();

    auto* ab = app.add_subcommand("ablate",
                                  "run the baseline / DTN / supervision ladder");
    add_common(ab, true, true);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);  // prints the diagnostic and usage hint
        return 2;
    }

    if (!out_dir.empty()) fs::create_directories(out_dir);

    if (gen->parsed()) {
        data::GenParams gp;
        gp.seed = gen_seed;
        gp.n_domains = static_cast<int>(gen_sizes.size());
        gp.sizes = gen_sizes;
        gp.min_len = gen_min_len;
        gp.max_len = gen_max_len;
        gp.alphabet_size = gen_alphabet;
        auto vocab = data::Vocabulary::build(gp.alphabet_size, gp.n_domains);
        auto train_set = data::generate_synthetic(vocab, gp);
        data::GenParams tp = gp;
        tp.source_seed = gen_seed + 1;
        tp.sizes.assign(gp.n_domains, gen_test_size);
        auto test_set = data::generate_synthetic(vocab, tp);

        fs::create_directories(out_dir + "/train");
        fs::create_directories(out_dir + "/test");
        std::vector<std::string> names, artifacts;
        for (int d = 0; d < gp.n_domains; ++d) {
            const std::string name = "d" + std::to_string(d);
            names.push_back(name);
            data::save_corpus(train_set[d], vocab, out_dir + "/train/" + name + ".tsv");
            data::save_corpus(test_set[d], vocab, out_dir + "/test/" + name + ".tsv");
            artifacts.push_back(out_dir + "/train/" + name + ".tsv");
            artifacts.push_back(out_dir + "/test/" + name + ".tsv");
        }
        data::save_manifest(names, out_dir + "/manifest.txt");
        json meta = {{"seed", gp.seed},          {"n_domains", gp.n_domains},
                     {"alphabet_size", gp.alphabet_size}, {"min_len", gp.min_len},
                     {"max_len", gp.max_len},    {"sizes", gp.sizes},
                     {"test_size", gen_test_size}};
        json rules = json::array();
        for (const auto& c : train_set) rules.push_back(c.rule_name);
        meta["rules"] = rules;
        spit(out_dir + "/dataset.json", meta.dump(2) + "\n");
        write_manifest(out_dir, "gen-data", meta, json::object(), artifacts);
        std::cout << "wrote " << gp.n_domains << " domains to " << out_dir << "\n";
        return 0;
    }

    auto cfg = resolve_config(config_path, overrides);
    json inputs = json::object();

    if (tb->parsed() || dc->parsed()) {
        auto ds = load_dataset(data_dir);
        fill_vocab_sizes(cfg, ds);
        if (cfg.log_path.empty()) cfg.log_path = out_dir + "/train_log.csv";
        cfg.validate();
        auto res = tb->parsed() ? train::train_baseline(cfg, ds.train)
                                : train::train_domain_control(cfg, ds.train, ds.vocab);
        const std::string ck = out_dir + "/checkpoint.json";
        ckpt::save_checkpoint(ck, cfg.model, res.params);
        inputs["data"] = file_hash(data_dir + "/dataset.json");
        write_manifest(out_dir, tb->parsed() ? "train-baseline" : "train-domain-control",
                       json::parse(train::config_to_json(cfg)), inputs,
                       {ck, cfg.log_path});
        std::cout << "checkpoint " << ckpt::checkpoint_hash(ck) << " final loss "
                  << res.log.back().nll_or_kd << "\n";
        return 0;
    }

    if (ft->parsed()) {
        auto ds = load_dataset(data_dir);
        fill_vocab_sizes(cfg, ds);
        cfg.validate();
        auto base = ckpt::load_checkpoint(base_path);
        std::vector<std::string> artifacts;
        for (std::size_t d = 0; d < ds.train.size(); ++d) {
            train::TrainConfig tcfg = cfg;
            tcfg.seed = cfg.seed + d;
            tcfg.log_path = out_dir + "/teacher_d" + std::to_string(d) + "_log.csv";
            auto res = train::finetune_teacher(tcfg, base.params, ds.train[d]);
            const std::string ck =
                out_dir + "/teacher_d" + std::to_string(d) + ".json";
            ckpt::save_checkpoint(ck, cfg.model, res.params);
            artifacts.push_back(ck);
            std::cout << "teacher d" << d << " " << ckpt::checkpoint_hash(ck) << "\n";
        }
        inputs["base"] = file_hash(base_path);
        write_manifest(out_dir, "finetune-teachers",
                       json::parse(train::config_to_json(cfg)), inputs, artifacts);
        return 0;
    }

    if (tu->parsed()) {
        auto ds = load_dataset(data_dir);
        fill_vocab_sizes(cfg, ds);
        if (cfg.log_path.empty()) cfg.log_path = out_dir + "/train_log.csv";
        cfg.validate();
        auto base = ckpt::load_checkpoint(base_path);
        supervision::TeacherSet teachers;
        const supervision::TeacherSet* tptr = nullptr;
        if ((cfg.distill_word || cfg.distill_seq)) {
            if (teachers_dir.empty())
                throw std::invalid_argument(
                    "distillation flags set but no --teachers directory given");
            teachers = load_teachers(teachers_dir,
                                     static_cast<int>(ds.train.size()));
            tptr = &teachers;
        }
        auto res = train::train_unified(cfg, base.params, ds.train, tptr);
        const std::string ck = out_dir + "/checkpoint.json";
        ckpt::save_checkpoint(ck, cfg.model, res.params);
        inputs["base"] = file_hash(base_path);
        if (tptr)
            for (std::size_t d = 0; d < ds.train.size(); ++d)
                inputs["teacher_d" + std::to_string(d)] = file_hash(
                    teachers_dir + "/teacher_d" + std::to_string(d) + ".json");
        write_manifest(out_dir, "train-unified",
                       json::parse(train::config_to_json(cfg)), inputs,
                       {ck, cfg.log_path});
        std::cout << "checkpoint " << ckpt::checkpoint_hash(ck) << "\n";
        return 0;
    }

    if (ev->parsed()) {
        auto ds = load_dataset(data_dir);
        auto ck = ckpt::load_checkpoint(ckpt_path);
        auto report = eval::make_report(domain_names(ds),
                                        score_per_domain(ck, ds, cfg.batch_tokens,
                                                         domain_tags));
        report.checkpoint_hash = ckpt::checkpoint_hash(ckpt_path);
        report.seed = eval_seed;
        report.config_summary = "d_model=" + std::to_string(ck.config.d_model);
        if (!reference_path.empty()) {
            auto ref = ckpt::load_checkpoint(reference_path);
            report.reference_name = "reference";
            for (std::size_t d = 0; d < ds.test.size(); ++d) {
                eval::DecodeOptions o1, o2;
                o1.batch_tokens = o2.batch_tokens = cfg.batch_tokens;
                if (transform::has_dtn(ck.params)) o1.dtn_domain = static_cast<int>(d);
                if (transform::has_dtn(ref.params)) o2.dtn_domain = static_cast<int>(d);
                if (domain_tags)
                    o1.prepend_tag = ds.vocab.domain_tag(static_cast<int>(d));
                eval::Sentences refs;
                for (const auto& p : ds.test[d].pairs) refs.push_back(p.second);
                auto h_sys = eval::decode_corpus(ck.config, ck.params, ds.test[d], o1);
                auto h_ref = eval::decode_corpus(ref.config, ref.params, ds.test[d], o2);
                report.deltas.push_back(eval::bleu(h_sys, refs) -
                                        eval::bleu(h_ref, refs));
                // small p: the reference reliably beats the candidate is ruled out
                const double p = eval::bootstrap_significance(h_ref, h_sys, refs,
                                                              bootstrap_n, eval_seed);
                report.significant.push_back(p < report.significance_threshold);
            }
        }
        spit(out_dir + "/report.txt", report.to_text());
        spit(out_dir + "/report.csv", report.to_csv());
        inputs["ckpt"] = report.checkpoint_hash;
        if (!reference_path.empty()) inputs["reference"] = file_hash(reference_path);
        write_manifest(out_dir, "evaluate", json{{"seed", eval_seed}}, inputs,
                       {out_dir + "/report.txt", out_dir + "/report.csv"});
        std::cout << report.to_text();
        return 0;
    }

    if (cm->parsed()) {
        auto ds = load_dataset(data_dir);
        auto ck = ckpt::load_checkpoint(ckpt_path);
        auto m = eval::cross_domain_matrix(ck.config, ck.params, ds.test,
                                           cfg.batch_tokens);
        std::ostringstream os;
        os.precision(17);
        os << "dtn";
        for (int j = 0; j < m.n; ++j) os << ",test_d" << j;
        os << "\n";
        for (int i = 0; i < m.n; ++i) {
            os << "dtn_d" << i;
            for (int j = 0; j < m.n; ++j) os << "," << m.at(i, j);
            os << "\n";
        }
        spit(out_dir + "/matrix.csv", os.str());
        inputs["ckpt"] = file_hash(ckpt_path);
        write_manifest(out_dir, "cross-matrix", json::object(), inputs,
                       {out_dir + "/matrix.csv"});
        std::cout << os.str()
                  << "diagonal dominant in every column: "
                  << (m.all_columns_dominant() ? "yes" : "no") << "\n";
        return 0;
    }

    if (pr->parsed()) {
        auto ds = load_dataset(data_dir);
        auto ck = ckpt::load_checkpoint(ckpt_path);
        std::ostringstream os;
        os << "site,accuracy\n";
        for (const std::string s : {"encoder_out", "dtn_out"}) {
            if (site != "both" && site != s) continue;
            const double acc = eval::probe_classifier_accuracy(
                ck.config, ck.params, ds.test, eval::site_from_string(s), eval_seed,
                cfg.batch_tokens);
            os << s << "," << acc << "\n";
        }
        spit(out_dir + "/probe.csv", os.str());
        inputs["ckpt"] = file_hash(ckpt_path);
        write_manifest(out_dir, "probe", json{{"seed", eval_seed}, {"site", site}},
                       inputs, {out_dir + "/probe.csv"});
        std::cout << os.str();
        return 0;
    }

    if (ex->parsed()) {
        auto ds = load_dataset(data_dir);
        auto ck = ckpt::load_checkpoint(ckpt_path);
        const std::string path = out_dir + "/reprs.csv";
        eval::export_representations(ck.config, ck.params, ds.test, path,
                                     cfg.batch_tokens);
        inputs["ckpt"] = file_hash(ckpt_path);
        write_manifest(out_dir, "export-reprs", json::object(), inputs,
                       {path, path + ".proj.csv"});
        std::cout << "wrote " << path << "\n";
        return 0;
    }

    if (ab->parsed()) {
        auto ds = load_dataset(data_dir);
        fill_vocab_sizes(cfg, ds);
        cfg.validate();
        const int n = static_cast<int>(ds.train.size());

        auto base = train::train_baseline(cfg, ds.train);
        ckpt::Checkpoint base_ck{cfg.model, model::clone_params(base.params)};

        train::TrainConfig tcfg = cfg;
        tcfg.max_steps = std::max(1, cfg.max_steps / 4);
        supervision::TeacherSet teachers;
        for (int d = 0; d < n; ++d) {
            train::TrainConfig one = tcfg;
            one.seed = cfg.seed + d;
            teachers.teachers[d] =
                train::finetune_teacher(one, base.params, ds.train[d]).params;
        }

        struct Variant {
            std::string name;
            bool dw, ds_, disc;
        };
        const std::vector<Variant> ladder = {{"baseline", false, false, false},
                                             {"dtn", false, false, false},
                                             {"dtn_distill", true, true, false},
                                             {"dtn_distill_discriminate", true, true,
                                              true}};
        std::ostringstream os;
        os.precision(17);
        os << "system,avg_bleu";
        for (int d = 0; d < n; ++d) os << ",d" << d;
        os << "\n";
        for (const auto& v : ladder) {
            ckpt::Checkpoint ck;
            ck.config = cfg.model;
            if (v.name == "baseline") {
                ck.params = model::clone_params(base.params);
            } else {
                train::TrainConfig ucfg = cfg;
                ucfg.distill_word = v.dw;
                ucfg.distill_seq = v.ds_;
                ucfg.discriminate = v.disc;
                ck.params = train::train_unified(ucfg, base.params, ds.train,
                                                 v.dw || v.ds_ ? &teachers : nullptr)
                                .params;
            }
            auto scores = score_per_domain(ck, ds, cfg.batch_tokens, false);
            double avg = 0;
            for (double s : scores) avg += s;
            avg /= n;
            os << v.name << "," << avg;
            for (double s : scores) os << "," << s;
            os << "\n";
            std::cout << v.name << " avg " << avg << "\n";
        }
        spit(out_dir + "/ablation.csv", os.str());
        inputs["data"] = file_hash(data_dir + "/dataset.json");
        write_manifest(out_dir, "ablate", json::parse(train::config_to_json(cfg)),
                       inputs, {out_dir + "/ablation.csv"});
        return 0;
    }

    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run_cli(argc, argv);
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
