#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "error.hpp"

namespace prefdiff {

using TokenId = std::uint32_t;

/// Small vocabulary: six special ids followed by content ids.
struct Vocab {
    static constexpr TokenId pad = 0;
    static constexpr TokenId bos = 1;
    static constexpr TokenId eos = 2;
    static constexpr TokenId sep_query = 3;
    static constexpr TokenId sep_resp1 = 4;
    static constexpr TokenId sep_resp2 = 5;
    static constexpr TokenId first_content = 6;

    std::size_t size = 64;

    bool is_content(TokenId id) const noexcept { return id >= first_content && id < size; }
    std::size_t content_count() const noexcept { return size - first_content; }

    void validate() const {
        if (size <= first_content)
            throw ConfigError("vocab.size must exceed " + std::to_string(first_content) + " (the special ids), got " +
                              std::to_string(size));
    }
};

enum class SequenceRole { query, response, pairwise_input };

struct TokenSequence {
    std::vector<TokenId> ids;
    SequenceRole role = SequenceRole::response;

    std::size_t size() const noexcept { return ids.size(); }
    friend bool operator==(const TokenSequence& a, const TokenSequence& b) { return a.ids == b.ids; }
};

inline TokenSequence query_seq(std::vector<TokenId> ids) { return {std::move(ids), SequenceRole::query}; }
inline TokenSequence response_seq(std::vector<TokenId> ids) { return {std::move(ids), SequenceRole::response}; }

/// Queries and responses are nonempty runs of content ids. Pairwise inputs
/// carry each separator exactly once, in query/resp1/resp2 order.
inline void validate_sequence(const TokenSequence& seq, const Vocab& vocab, const std::string& what) {
    if (seq.ids.empty()) throw DataError(what + ": sequence is empty");
    for (TokenId id : seq.ids)
        if (id >= vocab.size)
            throw DataError(what + ": token id " + std::to_string(id) + " is outside the vocabulary of size " +
                            std::to_string(vocab.size));
    if (seq.role != SequenceRole::pairwise_input) {
        for (TokenId id : seq.ids)
            if (!vocab.is_content(id))
                throw DataError(what + ": special token id " + std::to_string(id) + " inside a content sequence");
        return;
    }
    std::size_t pos[3] = {0, 0, 0};
    int count[3] = {0, 0, 0};
    for (std::size_t i = 0; i < seq.ids.size(); ++i) {
        const TokenId id = seq.ids[i];
        if (id >= Vocab::sep_query && id <= Vocab::sep_resp2) {
            ++count[id - Vocab::sep_query];
            pos[id - Vocab::sep_query] = i;
        }
    }
    if (count[0] != 1 || count[1] != 1 || count[2] != 1 || !(pos[0] < pos[1] && pos[1] < pos[2]))
        throw DataError(what + ": pairwise input must contain SEP_QUERY, SEP_RESP1, SEP_RESP2 once each, in order");
}

/// Token ids plus a segment id per position (0 query, 1 first response, 2 second response).
struct ModelInput {
    std::vector<TokenId> ids;
    std::vector<std::size_t> segments;

    std::size_t size() const noexcept { return ids.size(); }

    void append(const std::vector<TokenId>& tokens, std::size_t segment) {
        ids.insert(ids.end(), tokens.begin(), tokens.end());
        segments.insert(segments.end(), tokens.size(), segment);
    }
    void append(TokenId token, std::size_t segment) {
        ids.push_back(token);
        segments.push_back(segment);
    }
};

/// [BOS] x [SEP_QUERY] y [EOS]; the score head reads the EOS position.
inline ModelInput scoring_input(const TokenSequence& x, const TokenSequence& y) {
    ModelInput in;
    in.append(Vocab::bos, 0);
    in.append(x.ids, 0);
    in.append(Vocab::sep_query, 0);
    in.append(y.ids, 1);
    in.append(Vocab::eos, 1);
    return in;
}

/// [BOS] x [SEP_QUERY] y1 [SEP_RESP1] y2 [SEP_RESP2]; the score head reads the SEP_RESP2 position.
inline ModelInput pairwise_input(const TokenSequence& x, const TokenSequence& y1, const TokenSequence& y2) {
    ModelInput in;
    in.append(Vocab::bos, 0);
    in.append(x.ids, 0);
    in.append(Vocab::sep_query, 0);
    in.append(y1.ids, 1);
    in.append(Vocab::sep_resp1, 1);
    in.append(y2.ids, 2);
    in.append(Vocab::sep_resp2, 2);
    return in;
}

/// [BOS] x [SEP_QUERY] y; position |x|+1+t predicts y_t.
inline ModelInput policy_input(const TokenSequence& x, const TokenSequence& y) {
    ModelInput in;
    in.append(Vocab::bos, 0);
    in.append(x.ids, 0);
    in.append(Vocab::sep_query, 0);
    in.append(y.ids, 1);
    return in;
}

inline std::size_t pairwise_length(std::size_t query_len, std::size_t y1_len, std::size_t y2_len) {
    return query_len + y1_len + y2_len + 4;
}

} // namespace prefdiff
