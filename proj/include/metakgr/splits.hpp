#pragma once

#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "metakgr/error.hpp"

namespace metakgr {

/// Which relations form meta-train / meta-dev / meta-test tasks.
///
/// File schema (JSON, versioned):
///   {
///     "version": 1,
///     "meta_train": ["relA", ...] | "rest",
///     "meta_dev":   ["relB", ...],
///     "meta_test":  ["relC", ...]
///   }
/// "rest" assigns every relation present in the dataset but not named in
/// meta_dev/meta_test to meta-train.
struct RelationSplit {
    std::vector<std::string> meta_train;
    std::vector<std::string> meta_dev;
    std::vector<std::string> meta_test;
    bool train_is_rest = false;
};

inline RelationSplit load_split_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open split file: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("split file '" + path + "' is not valid JSON: " + e.what());
    }
    if (!j.is_object() || !j.contains("version"))
        throw FormatError("split file '" + path + "' lacks a version field");
    if (j["version"].get<int>() != 1)
        throw FormatError("split file '" + path + "' has unsupported version " +
                          j["version"].dump() + "; this build reads version 1");
    RelationSplit split;
    auto read_list = [&](const char* key, std::vector<std::string>& out) {
        if (!j.contains(key)) throw FormatError(std::string("split file missing '") + key + "'");
        for (const auto& v : j.at(key)) out.push_back(v.get<std::string>());
    };
    if (j.at("meta_train").is_string()) {
        if (j.at("meta_train").get<std::string>() != "rest")
            throw FormatError("meta_train must be a list or the string \"rest\"");
        split.train_is_rest = true;
    } else {
        read_list("meta_train", split.meta_train);
    }
    read_list("meta_dev", split.meta_dev);
    read_list("meta_test", split.meta_test);
    return split;
}

inline void save_split_file(const std::string& path, const RelationSplit& split) {
    nlohmann::json j;
    j["version"] = 1;
    if (split.train_is_rest)
        j["meta_train"] = "rest";
    else
        j["meta_train"] = split.meta_train;
    j["meta_dev"] = split.meta_dev;
    j["meta_test"] = split.meta_test;
    std::ofstream out(path);
    if (!out) throw ParseError("cannot write split file: " + path);
    out << j.dump(2) << '\n';
}

} // namespace metakgr
