#include "dtn/checkpoint.hpp"

#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "dtn/stats.hpp"

namespace dtn::ckpt {

using nlohmann::json;

namespace {

json config_to_json(const model::ModelConfig& c) {
    return json{{"vocab_size_src", c.vocab_size_src},
                {"vocab_size_tgt", c.vocab_size_tgt},
                {"d_model", c.d_model},
                {"n_heads", c.n_heads},
                {"n_enc_layers", c.n_enc_layers},
                {"n_dec_layers", c.n_dec_layers},
                {"d_ffn", c.d_ffn},
                {"max_len", c.max_len},
                {"dropout_rate", c.dropout_rate},
                {"pad_id", c.pad_id},
                {"bos_id", c.bos_id},
                {"eos_id", c.eos_id}};
}

model::ModelConfig config_from_json(const json& j) {
    model::ModelConfig c;
    j.at("vocab_size_src").get_to(c.vocab_size_src);
    j.at("vocab_size_tgt").get_to(c.vocab_size_tgt);
    j.at("d_model").get_to(c.d_model);
    j.at("n_heads").get_to(c.n_heads);
    j.at("n_enc_layers").get_to(c.n_enc_layers);
    j.at("n_dec_layers").get_to(c.n_dec_layers);
    j.at("d_ffn").get_to(c.d_ffn);
    j.at("max_len").get_to(c.max_len);
    j.at("dropout_rate").get_to(c.dropout_rate);
    j.at("pad_id").get_to(c.pad_id);
    j.at("bos_id").get_to(c.bos_id);
    j.at("eos_id").get_to(c.eos_id);
    return c;
}

}  // namespace

void save_checkpoint(const std::string& path, const model::ModelConfig& cfg,
                     const model::ModelParams& params) {
    json j;
    j["format"] = "dtn-ckpt-1";
    j["config"] = config_to_json(cfg);
    json p = json::object();
    for (const auto& [name, t] : params) {
        p[name] = json{{"shape", t.shape()}, {"data", t.data()}};
    }
    j["params"] = std::move(p);
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write checkpoint " + path);
    out << j.dump();
    out << "\n";
    if (!out) throw std::runtime_error("write failure on checkpoint " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read checkpoint " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw std::runtime_error("malformed checkpoint " + path + ": " + e.what());
    }
    if (j.value("format", "") != "dtn-ckpt-1")
        throw std::runtime_error("unsupported checkpoint format in " + path);
    Checkpoint ck;
    ck.config = config_from_json(j.at("config"));
    for (const auto& [name, entry] : j.at("params").items()) {
        ag::Shape shape = entry.at("shape").get<ag::Shape>();
        std::vector<double> data = entry.at("data").get<std::vector<double>>();
        if (data.size() != ag::numel(shape))
            throw std::runtime_error("checkpoint " + path + ": parameter " + name +
                                     " has " + std::to_string(data.size()) +
                                     " values for shape " + ag::shape_str(shape));
        ck.params[name] = ag::Tensor::from(shape, std::move(data), true);
    }
    return ck;
}

std::string checkpoint_hash(const std::string& path) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << stats::fnv1a_file(path);
    return os.str();
}

}  // namespace dtn::ckpt
