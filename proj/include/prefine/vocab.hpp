#pragma once

// The shared token universe. Every sequence in the pipeline — prompts,
// programs, samples — is a TokenSequence over this vocabulary: special
// tokens, prompt-framing tokens, and the expression-grammar tokens.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "prefine/common.hpp"

namespace prefine {

enum class Role : uint8_t { prompt = 0, response = 1 };

struct TokenSequence {
    std::vector<int> ids;
    std::vector<Role> roles;

    size_t size() const { return ids.size(); }
    bool empty() const { return ids.empty(); }

    void push_back(int id, Role role) {
        ids.push_back(id);
        roles.push_back(role);
    }

    std::vector<int> response_ids() const {
        std::vector<int> out;
        for (size_t i = 0; i < ids.size(); ++i)
            if (roles[i] == Role::response) out.push_back(ids[i]);
        return out;
    }

    size_t prompt_length() const {
        size_t n = 0;
        while (n < roles.size() && roles[n] == Role::prompt) ++n;
        return n;
    }

    size_t response_length() const { return ids.size() - prompt_length(); }

    bool operator==(const TokenSequence& o) const { return ids == o.ids && roles == o.roles; }
};

struct Vocab {
    std::vector<std::string> tokens;
    int pad_id = -1;
    int bos_id = -1;
    int eos_id = -1;
    int sep_id = -1;  // prompt/response separator
    int in_id = -1;   // demonstration-input framing
    int out_id = -1;  // demonstration-output framing
    int lparen_id = -1;
    int rparen_id = -1;
    int x0_id = -1;
    int x1_id = -1;
    int lit_min = -9;
    int lit_max = 9;
    int lit_base = -1;  // id of literal lit_min; literals are contiguous

    int size() const { return static_cast<int>(tokens.size()); }

    const std::string& text(int id) const { return tokens.at(static_cast<size_t>(id)); }

    int id_of(const std::string& tok) const {
        auto it = index_.find(tok);
        return it == index_.end() ? -1 : it->second;
    }

    bool has_literal(long long v) const { return v >= lit_min && v <= lit_max; }

    int literal_id(long long v) const {
        if (!has_literal(v)) throw ConfigError("vocab.literal", "value out of alphabet: " + std::to_string(v));
        return lit_base + static_cast<int>(v - lit_min);
    }

    bool is_literal(int id) const { return id >= lit_base && id <= lit_base + (lit_max - lit_min); }

    long long literal_value(int id) const { return lit_min + (id - lit_base); }

    void rebuild_index() {
        index_.clear();
        for (int i = 0; i < size(); ++i) {
            if (index_.count(tokens[static_cast<size_t>(i)]))
                throw ConfigError("vocab.tokens", "duplicate token: " + tokens[static_cast<size_t>(i)]);
            index_[tokens[static_cast<size_t>(i)]] = i;
        }
    }

    std::string decode(const std::vector<int>& ids, const std::string& sep = " ") const {
        std::vector<std::string> parts;
        parts.reserve(ids.size());
        for (int id : ids) parts.push_back(text(id));
        return join(parts, sep);
    }

private:
    std::map<std::string, int> index_;
};

// The one vocabulary used throughout: 4 special + 2 framing + 2 paren +
// 8 operators + 2 variables + 19 integer literals = 37 tokens.
inline Vocab standard_vocab() {
    Vocab v;
    auto add = [&v](const std::string& t) {
        v.tokens.push_back(t);
        return v.size() - 1;
    };
    v.pad_id = add("<pad>");
    v.bos_id = add("<bos>");
    v.eos_id = add("<eos>");
    v.sep_id = add("<sep>");
    v.in_id = add("<in>");
    v.out_id = add("<out>");
    v.lparen_id = add("(");
    v.rparen_id = add(")");
    for (const char* op : {"add", "sub", "mul", "div", "mod", "min", "max", "neg"}) add(op);
    v.x0_id = add("x0");
    v.x1_id = add("x1");
    v.lit_base = v.size();
    for (int k = v.lit_min; k <= v.lit_max; ++k) add(std::to_string(k));
    v.rebuild_index();
    if (v.size() > 64) throw ConfigError("vocab", "vocabulary exceeds 64 tokens");
    return v;
}

}  // namespace prefine
