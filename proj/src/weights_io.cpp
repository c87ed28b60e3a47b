#include "earlyexit/weights_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <vector>

#include <json.hpp>

static_assert(std::endian::native == std::endian::little,
              "weight container assumes a little-endian host");

namespace earlyexit {

namespace {

using nlohmann::json;

struct TensorRef {
    std::string name;
    std::vector<int> shape;
    const float* data;
    size_t count;
};

// Directory order is the storage order.
std::vector<TensorRef> tensor_directory(const Weights& w) {
    std::vector<TensorRef> dir;
    auto add_mat = [&](const std::string& name, const Mat& m) {
        dir.push_back({name, {m.rows, m.cols}, m.data.data(), m.data.size()});
    };
    add_mat("embedding", w.embedding);
    add_mat("output_head", w.output_head);
    for (int i = 1; i <= w.config.num_layers; ++i) {
        const auto& e = w.encoder[static_cast<size_t>(i) - 1];
        const auto& d = w.decoder[static_cast<size_t>(i) - 1];
        std::string en = "encoder.layer" + std::to_string(i);
        std::string dn = "decoder.layer" + std::to_string(i);
        auto add_attn = [&](const std::string& p, const AttentionWeights& a) {
            add_mat(p + ".wq", a.wq);
            add_mat(p + ".wk", a.wk);
            add_mat(p + ".wv", a.wv);
            add_mat(p + ".wo", a.wo);
        };
        add_attn(en + ".self", e.self_attn);
        add_mat(en + ".ffn.w1", e.ffn.w1);
        add_mat(en + ".ffn.w2", e.ffn.w2);
        add_attn(dn + ".self", d.self_attn);
        add_attn(dn + ".cross", d.cross_attn);
        add_mat(dn + ".ffn.w1", d.ffn.w1);
        add_mat(dn + ".ffn.w2", d.ffn.w2);
    }
    dir.push_back({"exit_classifier.w",
                   {static_cast<int>(w.exit_classifier.w.size())},
                   w.exit_classifier.w.data(), w.exit_classifier.w.size()});
    dir.push_back({"exit_classifier.b", {1}, &w.exit_classifier.b, 1});
    return dir;
}

json config_to_json(const ModelConfig& c) {
    return json{{"num_layers", c.num_layers}, {"vocab_size", c.vocab_size},
                {"d_model", c.d_model},       {"d_k", c.d_k},
                {"d_v", c.d_v},               {"d_ff", c.d_ff},
                {"num_heads", c.num_heads},   {"max_len", c.max_len}};
}

ModelConfig config_from_json(const json& j) {
    ModelConfig c;
    c.num_layers = j.at("num_layers").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.d_k = j.at("d_k").get<int>();
    c.d_v = j.at("d_v").get<int>();
    c.d_ff = j.at("d_ff").get<int>();
    c.num_heads = j.at("num_heads").get<int>();
    c.max_len = j.at("max_len").get<int>();
    return c;
}

}  // namespace

void save_weights(const Weights& w, const std::string& path) {
    w.validate();
    auto dir = tensor_directory(w);

    json header;
    header["format_version"] = 1;
    header["config"] = config_to_json(w.config);
    json tensors = json::array();
    uint64_t offset = 0;
    for (const auto& t : dir) {
        tensors.push_back({{"name", t.name}, {"shape", t.shape}, {"offset", offset}});
        offset += t.count * sizeof(float);
    }
    header["tensors"] = std::move(tensors);
    const std::string header_bytes = header.dump();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw WeightsIoError("cannot open " + path + " for writing");
    out.write(kWeightsMagic, sizeof(kWeightsMagic));
    const uint64_t hlen = header_bytes.size();
    out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    out.write(header_bytes.data(), static_cast<std::streamsize>(header_bytes.size()));
    for (const auto& t : dir) {
        out.write(reinterpret_cast<const char*>(t.data),
                  static_cast<std::streamsize>(t.count * sizeof(float)));
    }
    if (!out) throw WeightsIoError("short write to " + path);
}

Weights load_weights(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw WeightsIoError("cannot open " + path);
    char magic[sizeof(kWeightsMagic)];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kWeightsMagic, sizeof(magic)) != 0) {
        throw WeightsIoError(path + ": not a weight container (bad magic)");
    }
    uint64_t hlen = 0;
    in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
    if (!in || hlen == 0 || hlen > (64ull << 20)) {
        throw WeightsIoError(path + ": corrupt header length");
    }
    std::string header_bytes(hlen, '\0');
    in.read(header_bytes.data(), static_cast<std::streamsize>(hlen));
    if (!in) throw WeightsIoError(path + ": truncated header");

    json header;
    try {
        header = json::parse(header_bytes);
    } catch (const json::parse_error& e) {
        throw WeightsIoError(path + ": malformed header JSON: " + e.what());
    }

    Weights w;
    try {
        w.config = config_from_json(header.at("config"));
        w.config.validate();
    } catch (const json::exception& e) {
        throw WeightsIoError(path + ": bad config block: " + e.what());
    }

    // Resize every tensor to the config-implied shape, then fill from the
    // directory; a missing or mis-shaped directory entry is reported by name.
    const auto& c = w.config;
    w.embedding = Mat(c.vocab_size, c.d_model);
    w.output_head = Mat(c.vocab_size, c.d_model);
    w.encoder.resize(static_cast<size_t>(c.num_layers));
    w.decoder.resize(static_cast<size_t>(c.num_layers));
    for (auto& e : w.encoder) {
        e.self_attn = {Mat(c.d_k, c.d_model), Mat(c.d_k, c.d_model), Mat(c.d_v, c.d_model),
                       Mat(c.d_model, c.d_v)};
        e.ffn = {Mat(c.d_ff, c.d_model), Mat(c.d_model, c.d_ff)};
    }
    for (auto& d : w.decoder) {
        d.self_attn = {Mat(c.d_k, c.d_model), Mat(c.d_k, c.d_model), Mat(c.d_v, c.d_model),
                       Mat(c.d_model, c.d_v)};
        d.cross_attn = d.self_attn;
        d.ffn = {Mat(c.d_ff, c.d_model), Mat(c.d_model, c.d_ff)};
    }
    w.exit_classifier.w.assign(static_cast<size_t>(c.d_model), 0.0f);

    std::map<std::string, std::pair<std::vector<int>, uint64_t>> entries;
    try {
        for (const auto& t : header.at("tensors")) {
            entries[t.at("name").get<std::string>()] = {
                t.at("shape").get<std::vector<int>>(), t.at("offset").get<uint64_t>()};
        }
    } catch (const json::exception& e) {
        throw WeightsIoError(path + ": bad tensor directory: " + e.what());
    }

    const std::streamoff data_start =
        static_cast<std::streamoff>(sizeof(kWeightsMagic) + sizeof(uint64_t) + hlen);
    auto read_tensor = [&](const std::string& name, std::vector<int> want_shape, float* dst,
                           size_t count) {
        auto it = entries.find(name);
        if (it == entries.end()) {
            throw WeightsIoError(path + ": missing tensor " + name);
        }
        if (it->second.first != want_shape) {
            std::string got;
            for (int s : it->second.first) got += std::to_string(s) + ",";
            std::string want;
            for (int s : want_shape) want += std::to_string(s) + ",";
            throw WeightsIoError(path + ": tensor " + name + " has shape [" + got +
                                 "] but config requires [" + want + "]");
        }
        in.clear();
        in.seekg(data_start + static_cast<std::streamoff>(it->second.second));
        in.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(count * sizeof(float)));
        if (!in) throw WeightsIoError(path + ": truncated data for tensor " + name);
    };
    auto read_mat = [&](const std::string& name, Mat& m) {
        read_tensor(name, {m.rows, m.cols}, m.data.data(), m.data.size());
    };

    read_mat("embedding", w.embedding);
    read_mat("output_head", w.output_head);
    for (int i = 1; i <= c.num_layers; ++i) {
        auto& e = w.encoder[static_cast<size_t>(i) - 1];
        auto& d = w.decoder[static_cast<size_t>(i) - 1];
        std::string en = "encoder.layer" + std::to_string(i);
        std::string dn = "decoder.layer" + std::to_string(i);
        auto read_attn = [&](const std::string& p, AttentionWeights& a) {
            read_mat(p + ".wq", a.wq);
            read_mat(p + ".wk", a.wk);
            read_mat(p + ".wv", a.wv);
            read_mat(p + ".wo", a.wo);
        };
        read_attn(en + ".self", e.self_attn);
        read_mat(en + ".ffn.w1", e.ffn.w1);
        read_mat(en + ".ffn.w2", e.ffn.w2);
        read_attn(dn + ".self", d.self_attn);
        read_attn(dn + ".cross", d.cross_attn);
        read_mat(dn + ".ffn.w1", d.ffn.w1);
        read_mat(dn + ".ffn.w2", d.ffn.w2);
    }
    read_tensor("exit_classifier.w", {c.d_model}, w.exit_classifier.w.data(),
                w.exit_classifier.w.size());
    read_tensor("exit_classifier.b", {1}, &w.exit_classifier.b, 1);

    w.validate();
    return w;
}

}  // namespace earlyexit
