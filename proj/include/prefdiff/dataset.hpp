#pragma once

// Preference records and the JSONL dataset format:
//   {"query": [ids], "responses": [[ids], ...],
//    "pairs": [{"w": i, "l": j, "source": "clean|bt", "gt_gap": float,
//               "raw_difference": float?, "coefficient": float?}]}

#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "error.hpp"
#include "vocab.hpp"

namespace prefdiff {

enum class LabelSource { clean, bt };

inline const char* to_string(LabelSource s) { return s == LabelSource::clean ? "clean" : "bt"; }

struct PairLabel {
    std::size_t w = 0;
    std::size_t l = 1;
    LabelSource source = LabelSource::clean;
    /// r*(x, y_w) - r*(x, y_l); negative when a noisy label disagrees with the ground truth.
    double gt_gap = 0.0;
    std::optional<double> raw_difference;
    std::optional<double> coefficient;

    friend bool operator==(const PairLabel&, const PairLabel&) = default;
};

struct PreferenceRecord {
    TokenSequence query;
    std::vector<TokenSequence> responses;
    std::vector<PairLabel> pairs;

    friend bool operator==(const PreferenceRecord& a, const PreferenceRecord& b) {
        return a.query == b.query && a.responses == b.responses && a.pairs == b.pairs;
    }
};

/// One (x, y_w, y_l) comparison, the unit every pairwise loss consumes.
struct PreferencePair {
    TokenSequence query;
    TokenSequence y_w;
    TokenSequence y_l;
    LabelSource source = LabelSource::clean;
    double gt_gap = 0.0;
};

/// A comparison with its reward-difference coefficient attached.
struct AnnotatedPair {
    PreferencePair pair;
    double raw_difference = 1.0;
    double coefficient = 1.0;
    bool annotated = false;
};

inline void validate_record(const PreferenceRecord& rec, const Vocab& vocab, std::size_t max_len,
                            const std::string& where) {
    validate_sequence(rec.query, vocab, where + " query");
    if (rec.responses.size() < 2) throw DataError(where + ": a record needs at least 2 responses");
    for (std::size_t i = 0; i < rec.responses.size(); ++i)
        validate_sequence(rec.responses[i], vocab, where + " responses[" + std::to_string(i) + "]");
    if (rec.pairs.empty()) throw DataError(where + ": record has no pairs");
    for (std::size_t k = 0; k < rec.pairs.size(); ++k) {
        const PairLabel& p = rec.pairs[k];
        const std::string at = where + " pairs[" + std::to_string(k) + "]";
        if (p.w >= rec.responses.size() || p.l >= rec.responses.size())
            throw DataError(at + ": response index out of range");
        if (p.w == p.l) throw DataError(at + ": winner and loser are the same response (tie or self-pair)");
        if (rec.responses[p.w] == rec.responses[p.l]) throw DataError(at + ": winner and loser are identical sequences");
        if (p.coefficient && !(*p.coefficient > 0.0)) throw DataError(at + ": coefficient must be positive");
        const std::size_t len = pairwise_length(rec.query.size(), rec.responses[p.w].size(), rec.responses[p.l].size());
        if (len > max_len)
            throw DataError(at + ": pairwise input of length " + std::to_string(len) + " exceeds max length " +
                            std::to_string(max_len));
    }
}

inline nlohmann::json record_to_json(const PreferenceRecord& rec) {
    nlohmann::json responses = nlohmann::json::array();
    for (const auto& r : rec.responses) responses.push_back(r.ids);
    nlohmann::json pairs = nlohmann::json::array();
    for (const auto& p : rec.pairs) {
        nlohmann::json j{{"w", p.w}, {"l", p.l}, {"source", to_string(p.source)}, {"gt_gap", p.gt_gap}};
        if (p.raw_difference) j["raw_difference"] = *p.raw_difference;
        if (p.coefficient) j["coefficient"] = *p.coefficient;
        pairs.push_back(std::move(j));
    }
    return {{"query", rec.query.ids}, {"responses", responses}, {"pairs", pairs}};
}

inline PreferenceRecord record_from_json(const nlohmann::json& j, const std::string& where) {
    auto fail = [&](const std::string& msg) -> DataError { return DataError(where + ": " + msg); };
    if (!j.is_object()) throw fail("record must be a JSON object");
    for (const auto& [key, _] : j.items())
        if (key != "query" && key != "responses" && key != "pairs") throw fail("unknown field '" + key + "'");
    auto ids_of = [&](const nlohmann::json& v, const std::string& field) {
        if (!v.is_array()) throw fail("field '" + field + "' must be an array of token ids");
        std::vector<TokenId> ids;
        for (const auto& e : v) {
            if (!e.is_number_unsigned()) throw fail("field '" + field + "' must contain nonnegative integers");
            ids.push_back(e.get<TokenId>());
        }
        return ids;
    };
    PreferenceRecord rec;
    if (!j.contains("query")) throw fail("missing field 'query'");
    if (!j.contains("responses")) throw fail("missing field 'responses'");
    if (!j.contains("pairs")) throw fail("missing field 'pairs'");
    rec.query = query_seq(ids_of(j["query"], "query"));
    if (!j["responses"].is_array()) throw fail("field 'responses' must be an array");
    for (const auto& r : j["responses"]) rec.responses.push_back(response_seq(ids_of(r, "responses")));
    if (!j["pairs"].is_array()) throw fail("field 'pairs' must be an array");
    for (const auto& p : j["pairs"]) {
        if (!p.is_object()) throw fail("each pair must be an object");
        PairLabel label;
        for (const auto& [key, v] : p.items()) {
            if (key == "w" || key == "l") {
                if (!v.is_number_unsigned()) throw fail("pair field '" + key + "' must be a nonnegative integer");
                (key == "w" ? label.w : label.l) = v.get<std::size_t>();
            } else if (key == "source") {
                if (!v.is_string()) throw fail("pair field 'source' must be a string");
                const auto s = v.get<std::string>();
                if (s == "tie") throw fail("tie labels are not supported");
                if (s == "clean") label.source = LabelSource::clean;
                else if (s == "bt") label.source = LabelSource::bt;
                else throw fail("pair field 'source' must be clean|bt, got '" + s + "'");
            } else if (key == "tie") {
                if (v.is_boolean() && v.get<bool>()) throw fail("tie labels are not supported");
            } else if (key == "gt_gap" || key == "raw_difference" || key == "coefficient") {
                if (!v.is_number()) throw fail("pair field '" + key + "' must be a number");
                const double d = v.get<double>();
                if (key == "gt_gap") label.gt_gap = d;
                else if (key == "raw_difference") label.raw_difference = d;
                else label.coefficient = d;
            } else {
                throw fail("unknown pair field '" + key + "'");
            }
        }
        if (!p.contains("w") || !p.contains("l")) throw fail("pair requires fields 'w' and 'l'");
        if (!p.contains("source")) throw fail("pair requires field 'source'");
        if (!p.contains("gt_gap")) throw fail("pair requires field 'gt_gap'");
        rec.pairs.push_back(label);
    }
    return rec;
}

inline std::string records_to_jsonl(const std::vector<PreferenceRecord>& records) {
    std::string out;
    for (const auto& r : records) {
        out += record_to_json(r).dump();
        out += '\n';
    }
    return out;
}

inline void write_jsonl(const std::string& path, const std::vector<PreferenceRecord>& records) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot open '" + path + "' for writing");
    out << records_to_jsonl(records);
    if (!out) throw Error("failed writing '" + path + "'");
}

/// Parses and validates a whole dataset. Any bad line aborts the load; no
/// partial dataset is ever returned.
inline std::vector<PreferenceRecord> parse_jsonl(const std::string& text, const Vocab& vocab, std::size_t max_len,
                                                 const std::string& name) {
    std::vector<PreferenceRecord> records;
    std::size_t line_no = 0;
    std::size_t start = 0;
    while (start < text.size()) {
        std::size_t end = text.find('\n', start);
        const bool terminated = end != std::string::npos;
        if (!terminated) end = text.size();
        const std::string line = text.substr(start, end - start);
        start = end + 1;
        ++line_no;
        const std::string where = name + ":" + std::to_string(line_no);
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw DataError(where + ": malformed JSON" + (terminated ? "" : " (truncated final line)") + ": " + e.what());
        }
        PreferenceRecord rec = record_from_json(j, where);
        validate_record(rec, vocab, max_len, where);
        records.push_back(std::move(rec));
    }
    if (records.empty()) throw DataError(name + ": dataset is empty");
    return records;
}

inline std::vector<PreferenceRecord> ingest_jsonl(const std::string& path, const Vocab& vocab, std::size_t max_len) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open dataset '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_jsonl(ss.str(), vocab, max_len, path);
}

/// Flattens records into comparisons, in record then pair order.
inline std::vector<PreferencePair> to_pairs(const std::vector<PreferenceRecord>& records) {
    std::vector<PreferencePair> out;
    for (const auto& r : records)
        for (const auto& p : r.pairs) out.push_back({r.query, r.responses[p.w], r.responses[p.l], p.source, p.gt_gap});
    return out;
}

inline std::vector<AnnotatedPair> to_annotated_pairs(const std::vector<PreferenceRecord>& records) {
    std::vector<AnnotatedPair> out;
    for (const auto& r : records)
        for (const auto& p : r.pairs) {
            AnnotatedPair a;
            a.pair = {r.query, r.responses[p.w], r.responses[p.l], p.source, p.gt_gap};
            a.annotated = p.coefficient.has_value();
            a.coefficient = p.coefficient.value_or(1.0);
            a.raw_difference = p.raw_difference.value_or(1.0);
            out.push_back(std::move(a));
        }
    return out;
}

} // namespace prefdiff
