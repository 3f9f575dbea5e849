#pragma once

// The toy code domain: a prefix-notation integer expression language with
// mandatory parentheses. Provides the parser, the exact-integer evaluator,
// and execution verification of a candidate against a ground-truth program.

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "prefine/vocab.hpp"

namespace prefine::dsl {

enum class Op : uint8_t { add, sub, mul, div, mod, min, max, neg };

inline int arity(Op op) { return op == Op::neg ? 1 : 2; }

inline const char* op_name(Op op) {
    switch (op) {
        case Op::add: return "add";
        case Op::sub: return "sub";
        case Op::mul: return "mul";
        case Op::div: return "div";
        case Op::mod: return "mod";
        case Op::min: return "min";
        case Op::max: return "max";
        case Op::neg: return "neg";
    }
    return "?";
}

constexpr int kNumOps = 8;

struct Ast {
    enum class Kind : uint8_t { op, var, lit } kind = Kind::lit;
    Op op = Op::add;
    int var = 0;        // 0 -> x0, 1 -> x1
    long long lit = 0;
    std::vector<Ast> children;

    static Ast make_var(int idx) {
        Ast a;
        a.kind = Kind::var;
        a.var = idx;
        return a;
    }
    static Ast make_lit(long long v) {
        Ast a;
        a.kind = Kind::lit;
        a.lit = v;
        return a;
    }
    static Ast make_op(Op op, std::vector<Ast> kids) {
        Ast a;
        a.kind = Kind::op;
        a.op = op;
        a.children = std::move(kids);
        return a;
    }

    int depth() const {
        if (kind != Kind::op) return 0;
        int d = 0;
        for (const auto& c : children) d = std::max(d, c.depth());
        return d + 1;
    }

    bool operator==(const Ast& o) const {
        if (kind != o.kind) return false;
        switch (kind) {
            case Kind::var: return var == o.var;
            case Kind::lit: return lit == o.lit;
            case Kind::op: return op == o.op && children == o.children;
        }
        return false;
    }
};

// Token ids of the canonical (fully parenthesized, space-separated) form.
inline void print_tokens(const Ast& ast, const Vocab& v, std::vector<int>& out) {
    switch (ast.kind) {
        case Ast::Kind::var:
            out.push_back(ast.var == 0 ? v.x0_id : v.x1_id);
            return;
        case Ast::Kind::lit:
            out.push_back(v.literal_id(ast.lit));
            return;
        case Ast::Kind::op:
            out.push_back(v.lparen_id);
            out.push_back(v.id_of(op_name(ast.op)));
            for (const auto& c : ast.children) print_tokens(c, v, out);
            out.push_back(v.rparen_id);
            return;
    }
}

inline std::vector<int> print_tokens(const Ast& ast, const Vocab& v) {
    std::vector<int> out;
    print_tokens(ast, v, out);
    return out;
}

inline std::string print_text(const Ast& ast, const Vocab& v) {
    return v.decode(print_tokens(ast, v));
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

struct SyntaxErrorInfo {
    size_t position = 0;  // index of the first offending token
    std::string message;
};

struct ParseResult {
    std::optional<Ast> ast;
    SyntaxErrorInfo error;
    bool ok() const { return ast.has_value(); }
};

namespace detail {

inline std::optional<Op> op_of_token(int id, const Vocab& v) {
    for (int k = 0; k < kNumOps; ++k) {
        const Op op = static_cast<Op>(k);
        if (id == v.id_of(op_name(op))) return op;
    }
    return std::nullopt;
}

inline bool parse_expr(const std::vector<int>& toks, const Vocab& v, size_t& pos, Ast& out,
                       SyntaxErrorInfo& err) {
    if (pos >= toks.size()) {
        err = {toks.size(), "unexpected end of input"};
        return false;
    }
    const int id = toks[pos];
    if (id == v.x0_id || id == v.x1_id) {
        out = Ast::make_var(id == v.x0_id ? 0 : 1);
        ++pos;
        return true;
    }
    if (v.is_literal(id)) {
        out = Ast::make_lit(v.literal_value(id));
        ++pos;
        return true;
    }
    if (id != v.lparen_id) {
        err = {pos, "expected '(', variable, or literal, got '" + v.text(id) + "'"};
        return false;
    }
    ++pos;
    if (pos >= toks.size()) {
        err = {toks.size(), "unexpected end of input after '('"};
        return false;
    }
    const auto op = op_of_token(toks[pos], v);
    if (!op) {
        err = {pos, "expected operator, got '" + v.text(toks[pos]) + "'"};
        return false;
    }
    ++pos;
    std::vector<Ast> kids;
    for (int k = 0; k < arity(*op); ++k) {
        Ast child;
        if (!parse_expr(toks, v, pos, child, err)) return false;
        kids.push_back(std::move(child));
    }
    if (pos >= toks.size()) {
        err = {toks.size(), "missing ')'"};
        return false;
    }
    if (toks[pos] != v.rparen_id) {
        err = {pos, "expected ')' after " + std::to_string(arity(*op)) + " operand(s), got '" +
                        v.text(toks[pos]) + "'"};
        return false;
    }
    ++pos;
    out = Ast::make_op(*op, std::move(kids));
    return true;
}

}  // namespace detail

// Accepts exactly the prefix grammar; input is the candidate's token ids with
// special tokens already stripped. A complete parse followed by extra tokens
// is a syntax error (trailing-tokens).
inline ParseResult parse(const std::vector<int>& tokens, const Vocab& v) {
    ParseResult r;
    if (tokens.empty()) {
        r.error = {0, "empty program"};
        return r;
    }
    Ast ast;
    SyntaxErrorInfo err;
    size_t pos = 0;
    if (!detail::parse_expr(tokens, v, pos, ast, err)) {
        r.error = err;
        return r;
    }
    if (pos != tokens.size()) {
        r.error = {pos, "trailing tokens after complete expression"};
        return r;
    }
    r.ast = std::move(ast);
    return r;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct Input {
    long long x0 = 0;
    long long x1 = 0;
    bool operator==(const Input& o) const { return x0 == o.x0 && x1 == o.x1; }
};

using TestInputs = std::vector<Input>;

struct EvalResult {
    bool ok = false;
    long long value = 0;
    static EvalResult success(long long v) { return {true, v}; }
    static EvalResult failure() { return {false, 0}; }
};

// Exact integer semantics; div and mod truncate toward zero; division or
// modulo by zero fails. Pure.
inline EvalResult evaluate(const Ast& ast, const Input& in) {
    switch (ast.kind) {
        case Ast::Kind::var:
            return EvalResult::success(ast.var == 0 ? in.x0 : in.x1);
        case Ast::Kind::lit:
            return EvalResult::success(ast.lit);
        case Ast::Kind::op: {
            const EvalResult a = evaluate(ast.children[0], in);
            if (!a.ok) return a;
            if (ast.op == Op::neg) return EvalResult::success(-a.value);
            const EvalResult b = evaluate(ast.children[1], in);
            if (!b.ok) return b;
            switch (ast.op) {
                case Op::add: return EvalResult::success(a.value + b.value);
                case Op::sub: return EvalResult::success(a.value - b.value);
                case Op::mul: return EvalResult::success(a.value * b.value);
                case Op::div:
                    if (b.value == 0) return EvalResult::failure();
                    return EvalResult::success(a.value / b.value);
                case Op::mod:
                    if (b.value == 0) return EvalResult::failure();
                    return EvalResult::success(a.value % b.value);
                case Op::min: return EvalResult::success(std::min(a.value, b.value));
                case Op::max: return EvalResult::success(std::max(a.value, b.value));
                case Op::neg: break;
            }
            return EvalResult::failure();
        }
    }
    return EvalResult::failure();
}

// ---------------------------------------------------------------------------
// Verification
// ---------------------------------------------------------------------------

enum class Verdict : uint8_t { correct_output, wrong_output, runtime_error, syntax_error };

inline const char* verdict_name(Verdict v) {
    switch (v) {
        case Verdict::correct_output: return "CorrectOutput";
        case Verdict::wrong_output: return "WrongOutput";
        case Verdict::runtime_error: return "RuntimeError";
        case Verdict::syntax_error: return "SyntaxError";
    }
    return "?";
}

inline bool executable(Verdict v) {
    return v == Verdict::correct_output || v == Verdict::wrong_output;
}

struct VerifyOutcome {
    Verdict verdict = Verdict::syntax_error;
    std::string detail;
};

// Pulls the candidate's program tokens out of a sampled sequence: the
// response region with a single trailing EOS stripped. Anything else
// (missing EOS, framing tokens mid-program) is left for the parser to
// reject with a position.
inline std::vector<int> extract_program_tokens(const TokenSequence& seq, const Vocab& v) {
    std::vector<int> resp = seq.response_ids();
    if (!resp.empty() && resp.back() == v.eos_id) resp.pop_back();
    return resp;
}

// Verdict of candidate program tokens against precomputed ground-truth
// outputs. Categories are exhaustive and mutually exclusive: syntax beats
// runtime beats wrong-output; correct only when all outputs match.
inline VerifyOutcome verify_tokens(const std::vector<int>& candidate, const TestInputs& inputs,
                                   const std::vector<long long>& expected, const Vocab& v) {
    const ParseResult parsed = parse(candidate, v);
    if (!parsed.ok()) {
        return {Verdict::syntax_error,
                "token " + std::to_string(parsed.error.position) + ": " + parsed.error.message};
    }
    bool any_mismatch = false;
    for (size_t j = 0; j < inputs.size(); ++j) {
        const EvalResult r = evaluate(*parsed.ast, inputs[j]);
        if (!r.ok) return {Verdict::runtime_error, "division by zero on input " + std::to_string(j)};
        if (r.value != expected[j]) any_mismatch = true;
    }
    if (any_mismatch) return {Verdict::wrong_output, ""};
    return {Verdict::correct_output, ""};
}

// Execution verification of one sampled candidate against the ground-truth
// program's outputs on the task's test inputs.
inline VerifyOutcome verify(const TokenSequence& candidate, const Ast& ground_truth,
                            const TestInputs& inputs, const Vocab& v) {
    std::vector<long long> expected;
    expected.reserve(inputs.size());
    for (const auto& in : inputs) {
        const EvalResult r = evaluate(ground_truth, in);
        if (!r.ok) throw std::logic_error("invalid ground truth: runtime error on its own test input");
        expected.push_back(r.value);
    }
    return verify_tokens(extract_program_tokens(candidate, v), inputs, expected, v);
}

}  // namespace prefine::dsl
