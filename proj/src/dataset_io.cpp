#include "gidd/dataset_io.hpp"

#include "gidd/error.hpp"

#include <json.hpp>

#include <fstream>
#include <numeric>

namespace gidd {

using nlohmann::json;

DatasetFile load_dataset(std::istream& in) {
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw ValidationError(std::string("dataset is not valid JSON: ") + e.what());
    }
    DatasetFile f;
    try {
        f.vocab.size = j.at("vocab_size").get<std::size_t>();
        f.vocab.mask_id = j.at("mask_id").get<Token>();
        if (j.contains("empty_id") && !j.at("empty_id").is_null()) {
            f.vocab.empty_id = j.at("empty_id").get<Token>();
        }
        f.data.sequences = j.at("sequences").get<std::vector<TokenSequence>>();
        if (j.contains("weights")) {
            f.data.weights = j.at("weights").get<std::vector<double>>();
        } else {
            f.data.weights.assign(f.data.sequences.size(), 1.0);
        }
    } catch (const json::exception& e) {
        throw ValidationError(std::string("dataset: ") + e.what());
    }
    if (f.data.weights.size() != f.data.sequences.size()) {
        throw ValidationError("dataset: weights and sequences differ in length");
    }
    const double total = std::accumulate(f.data.weights.begin(), f.data.weights.end(), 0.0);
    if (!(total > 0.0)) {
        throw ValidationError("dataset: weights must have positive total");
    }
    for (double& w : f.data.weights) {
        w /= total;
    }
    try {
        f.vocab.validate();
        f.data.validate(f.vocab);
    } catch (const RangeError& e) {
        throw ValidationError(std::string("dataset: ") + e.what());
    }
    return f;
}

DatasetFile load_dataset_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw ValidationError("cannot open dataset '" + path + "'");
    }
    return load_dataset(in);
}

void write_dataset(std::ostream& out, const DatasetFile& file) {
    json j;
    j["vocab_size"] = file.vocab.size;
    j["mask_id"] = file.vocab.mask_id;
    if (file.vocab.empty_id) {
        j["empty_id"] = *file.vocab.empty_id;
    }
    j["sequences"] = file.data.sequences;
    j["weights"] = file.data.weights;
    out << j.dump() << '\n';
}

DatasetFile iid_dataset(std::span<const double> p, std::size_t length) {
    if (p.empty() || length == 0) {
        throw RangeError("iid_dataset: need symbols and a positive length");
    }
    DatasetFile f;
    f.vocab = Vocab::with_mask_last(p.size() + 1);
    std::size_t count = 1;
    for (std::size_t i = 0; i < length; ++i) {
        count *= p.size();
        if (count > EnumerableDataset::kMaxSequences) {
            throw RangeError("iid_dataset: too many sequences to enumerate");
        }
    }
    for (std::size_t code = 0; code < count; ++code) {
        TokenSequence s(length);
        double w = 1.0;
        std::size_t c = code;
        for (std::size_t i = length; i-- > 0;) {
            s[i] = static_cast<Token>(c % p.size());
            w *= p[s[i]];
            c /= p.size();
        }
        f.data.sequences.push_back(std::move(s));
        f.data.weights.push_back(w);
    }
    f.vocab.validate();
    f.data.validate(f.vocab);
    return f;
}

} // namespace gidd
