#pragma once
/*
 * Symbols p(v, t, x, xi): expression trees with order / homogeneity metadata.
 *
 * Grammar (full EBNF in docs/symbol_grammar.md):
 *   symbol  = expr { ";" attr }
 *   attr    = ("order" | "homogeneous" | "real") "=" value
 *   expr    = term { ("+" | "-") term }
 *   term    = unary { ("*" | "/") unary }
 *   unary   = ("-" | "+") unary | power
 *   power   = primary [ "^" unary ]
 *   primary = number | name | name "(" expr { "," expr } ")" | "(" expr ")"
 *
 * Names: t, tau, x1, x2, xi1, xi2, v0, v1, ..., i, pi, absxi.
 * Functions: sin, cos, exp, step(u[, k]) (quintic smoothstep on [0,1] and its
 * k-th derivative), hom(e, m) (degree-m homogeneous extension of e from the
 * unit frequency sphere).  absxi is (1/4 + tau^2 + |xi|^2)^{1/2}.
 */

#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>
#include <cmath>
#include <complex>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <limits>
#include <memory>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "errors.hpp"
#include "grid.hpp"

namespace microsolve {

enum class VarKind { T, X, Tau, Xi, V };

struct Var {
    VarKind kind = VarKind::T;
    int index = 0;
    bool operator==(const Var&) const = default;
    bool is_frequency() const { return kind == VarKind::Tau || kind == VarKind::Xi; }
};

inline Var var_t() { return {VarKind::T, 0}; }
inline Var var_tau() { return {VarKind::Tau, 0}; }
inline Var var_x(int i) { return {VarKind::X, i}; }
inline Var var_xi(int i) { return {VarKind::Xi, i}; }
inline Var var_v(int k) { return {VarKind::V, k}; }

struct EvalPoint {
    double t = 0.0;
    Point x{0.0, 0.0};
    double tau = 0.0;
    std::array<double, 2> xi{0.0, 0.0};
    std::span<const cplx> jet{};

    double get(Var v) const {
        switch (v.kind) {
            case VarKind::T: return t;
            case VarKind::X: return x[v.index];
            case VarKind::Tau: return tau;
            case VarKind::Xi: return xi[v.index];
            default: return 0.0;
        }
    }
    void set(Var v, double value) {
        switch (v.kind) {
            case VarKind::T: t = value; break;
            case VarKind::X: x[v.index] = value; break;
            case VarKind::Tau: tau = value; break;
            case VarKind::Xi: xi[v.index] = value; break;
            default: break;
        }
    }
    double freq_norm2() const { return tau * tau + xi[0] * xi[0] + xi[1] * xi[1]; }
};

// Quintic smoothstep S(u) = 6u^5 - 15u^4 + 10u^3 clamped to [0,1], and its derivatives.
inline double smoothstep(double u, int k = 0) {
    if (k == 0) {
        if (u <= 0.0) return 0.0;
        if (u >= 1.0) return 1.0;
        return std::clamp(u * u * u * (10.0 + u * (-15.0 + 6.0 * u)), 0.0, 1.0);
    }
    if (u <= 0.0 || u >= 1.0) return 0.0;
    switch (k) {
        case 1: return 30.0 * u * u * (1.0 - u) * (1.0 - u);
        case 2: return 60.0 * u * (1.0 - u) * (1.0 - 2.0 * u);
        case 3: return 60.0 * (1.0 - 6.0 * u + 6.0 * u * u);
        case 4: return 60.0 * (-6.0 + 12.0 * u);
        case 5: return 720.0;
        default: return 0.0;
    }
}

// ---------------------------------------------------------------------------
// Expression tree

enum class Op { Const, Var, AbsXi, Add, Sub, Mul, Div, Neg, Pow, Sin, Cos, Exp, Step, Hom };

struct Node;
using Expr = std::shared_ptr<const Node>;

struct Node {
    Op op = Op::Const;
    cplx value{};
    Var var{};
    int deriv = 0;       // derivative order for Step
    double degree = 0;   // homogeneity degree for Hom
    Expr a, b;
};

namespace expr {

inline Expr make(Node n) { return std::make_shared<const Node>(std::move(n)); }
inline Expr constant(cplx c) {
    Node n;
    n.value = c;
    return make(n);
}
inline Expr constant(double c) { return constant(cplx(c, 0.0)); }
inline Expr variable(Var v) {
    Node n;
    n.op = Op::Var;
    n.var = v;
    return make(n);
}
inline Expr absxi() {
    Node n;
    n.op = Op::AbsXi;
    return make(n);
}
inline bool is_const(const Expr& e) { return e->op == Op::Const; }
inline bool is_const(const Expr& e, double v) { return e->op == Op::Const && e->value == cplx(v, 0.0); }

inline Expr neg(Expr a) {
    if (is_const(a)) return constant(-a->value);
    if (a->op == Op::Neg) return a->a;
    Node n;
    n.op = Op::Neg;
    n.a = std::move(a);
    return make(n);
}
inline Expr binary(Op op, Expr a, Expr b) {
    Node n;
    n.op = op;
    n.a = std::move(a);
    n.b = std::move(b);
    return make(n);
}
inline Expr add(Expr a, Expr b) {
    if (is_const(a) && is_const(b)) return constant(a->value + b->value);
    if (is_const(a, 0)) return b;
    if (is_const(b, 0)) return a;
    if (b->op == Op::Neg) return binary(Op::Sub, a, b->a);
    return binary(Op::Add, a, b);
}
inline Expr sub(Expr a, Expr b) {
    if (is_const(a) && is_const(b)) return constant(a->value - b->value);
    if (is_const(b, 0)) return a;
    if (is_const(a, 0)) return neg(b);
    if (b->op == Op::Neg) return binary(Op::Add, a, b->a);
    return binary(Op::Sub, a, b);
}
inline Expr mul(Expr a, Expr b) {
    if (is_const(a) && is_const(b)) return constant(a->value * b->value);
    if (is_const(a, 0) || is_const(b, 0)) return constant(0.0);
    if (is_const(a, 1)) return b;
    if (is_const(b, 1)) return a;
    if (is_const(a, -1)) return neg(b);
    if (is_const(b, -1)) return neg(a);
    if (a->op == Op::Neg && b->op == Op::Neg) return mul(a->a, b->a);
    if (a->op == Op::Neg) return neg(mul(a->a, b));
    if (b->op == Op::Neg) return neg(mul(a, b->a));
    return binary(Op::Mul, a, b);
}
inline Expr div(Expr a, Expr b) {
    if (is_const(a) && is_const(b) && b->value != cplx(0.0)) return constant(a->value / b->value);
    if (is_const(a, 0)) return constant(0.0);
    if (is_const(b, 1)) return a;
    if (a->op == Op::Neg) return neg(div(a->a, b));
    return binary(Op::Div, a, b);
}
inline Expr pow(Expr a, Expr b) {
    if (is_const(b, 0)) return constant(1.0);
    if (is_const(b, 1)) return a;
    if (is_const(a) && is_const(b)) {
        if (a->value.imag() == 0.0 && b->value.imag() == 0.0 &&
            (a->value.real() > 0.0 || b->value.real() == std::round(b->value.real())))
            return constant(std::pow(a->value.real(), b->value.real()));
    }
    return binary(Op::Pow, a, b);
}
inline Expr func(Op op, Expr a, int deriv = 0) {
    if (is_const(a) && a->value.imag() == 0.0 && op == Op::Step)
        return constant(smoothstep(a->value.real(), deriv));
    if (op == Op::Step && deriv > 5) return constant(0.0);
    Node n;
    n.op = op;
    n.a = std::move(a);
    n.deriv = deriv;
    return make(n);
}
inline Expr hom(Expr a, double degree) {
    if (is_const(a, 0)) return constant(0.0);
    Node n;
    n.op = Op::Hom;
    n.a = std::move(a);
    n.degree = degree;
    return make(n);
}

inline bool depends_on(const Expr& e, Var v) {
    switch (e->op) {
        case Op::Const: return false;
        case Op::Var: return e->var == v;
        case Op::AbsXi: return v.is_frequency();
        case Op::Hom: return v.is_frequency() || depends_on(e->a, v);
        default: return (e->a && depends_on(e->a, v)) || (e->b && depends_on(e->b, v));
    }
}

// Visits every variable occurring in the tree.
template <class F>
void for_each_var(const Expr& e, F&& f) {
    if (e->op == Op::Var) f(e->var);
    if (e->a) for_each_var(e->a, f);
    if (e->b) for_each_var(e->b, f);
}

struct Usage {
    bool t = false, tau = false, absxi = false, hom = false;
    int x_dims = 0, xi_dims = 0, jet_arity = 0;
};
inline void collect_usage(const Expr& e, Usage& u) {
    switch (e->op) {
        case Op::Var:
            switch (e->var.kind) {
                case VarKind::T: u.t = true; break;
                case VarKind::Tau: u.tau = true; break;
                case VarKind::X: u.x_dims = std::max(u.x_dims, e->var.index + 1); break;
                case VarKind::Xi: u.xi_dims = std::max(u.xi_dims, e->var.index + 1); break;
                case VarKind::V: u.jet_arity = std::max(u.jet_arity, e->var.index + 1); break;
            }
            break;
        case Op::AbsXi: u.absxi = true; break;
        case Op::Hom: u.hom = true; break;
        default: break;
    }
    if (e->a) collect_usage(e->a, u);
    if (e->b) collect_usage(e->b, u);
}

// ---------------------------------------------------------------------------
// Evaluation

inline cplx eval(const Node& n, const EvalPoint& p) {
    switch (n.op) {
        case Op::Const: return n.value;
        case Op::Var:
            if (n.var.kind == VarKind::V) {
                if (std::size_t(n.var.index) >= p.jet.size()) throw DomainError("jet slot v" + std::to_string(n.var.index) + " not supplied");
                return p.jet[n.var.index];
            }
            return p.get(n.var);
        case Op::AbsXi: return std::sqrt(0.25 + p.freq_norm2());
        case Op::Add: return eval(*n.a, p) + eval(*n.b, p);
        case Op::Sub: return eval(*n.a, p) - eval(*n.b, p);
        case Op::Mul: {
            cplx l = eval(*n.a, p);
            if (l == cplx(0.0)) return 0.0;
            return l * eval(*n.b, p);
        }
        case Op::Div: {
            cplx d = eval(*n.b, p);
            if (d == cplx(0.0)) throw DomainError("division by zero outside the declared domain");
            return eval(*n.a, p) / d;
        }
        case Op::Neg: return -eval(*n.a, p);
        case Op::Pow: {
            cplx base = eval(*n.a, p);
            cplx ex = eval(*n.b, p);
            if (ex.imag() == 0.0) {
                double e = ex.real();
                if (e == std::round(e) && std::abs(e) <= 64) {
                    int k = int(e);
                    cplx r = 1.0, b = base;
                    unsigned m = unsigned(std::abs(k));
                    while (m) {
                        if (m & 1u) r *= b;
                        b *= b;
                        m >>= 1u;
                    }
                    if (k < 0) {
                        if (r == cplx(0.0)) throw DomainError("negative power of zero");
                        r = 1.0 / r;
                    }
                    return r;
                }
                if (base.imag() == 0.0 && base.real() >= 0.0) return std::pow(base.real(), e);
                return std::pow(base, e);
            }
            return std::pow(base, ex);
        }
        case Op::Sin: return std::sin(eval(*n.a, p));
        case Op::Cos: return std::cos(eval(*n.a, p));
        case Op::Exp: return std::exp(eval(*n.a, p));
        case Op::Step: {
            cplx u = eval(*n.a, p);
            return smoothstep(u.real(), n.deriv);
        }
        case Op::Hom: {
            double r = std::sqrt(p.freq_norm2());
            if (r == 0.0) return 0.0;
            EvalPoint q = p;
            q.tau /= r;
            q.xi[0] /= r;
            q.xi[1] /= r;
            return std::pow(r, n.degree) * eval(*n.a, q);
        }
    }
    return 0.0;
}

// ---------------------------------------------------------------------------
// Differentiation

inline Expr diff(const Expr& e, Var v);

inline Expr diff_hom(const Expr& e, Var v) {
    const Expr& inner = e->a;
    if (!v.is_frequency()) return hom(diff(inner, v), e->degree);
    // On the unit sphere: d_i H = m w_i e + d_i e - w_i sum_j w_j d_j e, extended with degree m-1.
    const std::array<Var, 3> freq_vars{var_tau(), var_xi(0), var_xi(1)};
    Expr radial = constant(0.0);
    for (Var w : freq_vars) {
        Expr dj = diff(inner, w);
        if (!is_const(dj, 0)) radial = add(radial, mul(variable(w), dj));
    }
    Expr wi = variable(v);
    Expr body = add(mul(constant(e->degree), mul(wi, inner)), sub(diff(inner, v), mul(wi, radial)));
    return hom(body, e->degree - 1.0);
}

inline Expr diff(const Expr& e, Var v) {
    switch (e->op) {
        case Op::Const: return constant(0.0);
        case Op::Var: return constant(e->var == v ? 1.0 : 0.0);
        case Op::AbsXi:
            if (!v.is_frequency()) return constant(0.0);
            return div(variable(v), e);
        case Op::Add: return add(diff(e->a, v), diff(e->b, v));
        case Op::Sub: return sub(diff(e->a, v), diff(e->b, v));
        case Op::Neg: return neg(diff(e->a, v));
        case Op::Mul: return add(mul(diff(e->a, v), e->b), mul(e->a, diff(e->b, v)));
        case Op::Div: {
            Expr da = diff(e->a, v), db = diff(e->b, v);
            if (is_const(db, 0)) return div(da, e->b);
            return div(sub(mul(da, e->b), mul(e->a, db)), pow(e->b, constant(2.0)));
        }
        case Op::Pow: {
            if (depends_on(e->b, v)) {
                if (!depends_on(e->a, v) && is_const(e->a)) {
                    // c^g -> c^g log(c) g'
                    return mul(mul(e, constant(std::log(e->a->value))), diff(e->b, v));
                }
                throw DomainError("differentiation of a variable exponent is not supported");
            }
            Expr da = diff(e->a, v);
            if (is_const(da, 0)) return constant(0.0);
            Expr em1 = is_const(e->b) ? constant(e->b->value - 1.0) : sub(e->b, constant(1.0));
            return mul(mul(e->b, pow(e->a, em1)), da);
        }
        case Op::Sin: return mul(func(Op::Cos, e->a), diff(e->a, v));
        case Op::Cos: return neg(mul(func(Op::Sin, e->a), diff(e->a, v)));
        case Op::Exp: return mul(e, diff(e->a, v));
        case Op::Step: return mul(func(Op::Step, e->a, e->deriv + 1), diff(e->a, v));
        case Op::Hom: return diff_hom(e, v);
    }
    return constant(0.0);
}

// Replaces variables by expressions.
inline Expr substitute(const Expr& e, const std::function<Expr(Var)>& map) {
    switch (e->op) {
        case Op::Var: {
            Expr r = map(e->var);
            return r ? r : e;
        }
        case Op::Const:
        case Op::AbsXi: return e;
        case Op::Add: return add(substitute(e->a, map), substitute(e->b, map));
        case Op::Sub: return sub(substitute(e->a, map), substitute(e->b, map));
        case Op::Mul: return mul(substitute(e->a, map), substitute(e->b, map));
        case Op::Div: return div(substitute(e->a, map), substitute(e->b, map));
        case Op::Neg: return neg(substitute(e->a, map));
        case Op::Pow: return pow(substitute(e->a, map), substitute(e->b, map));
        case Op::Sin:
        case Op::Cos:
        case Op::Exp:
        case Op::Step: return func(e->op, substitute(e->a, map), e->deriv);
        case Op::Hom: return hom(substitute(e->a, map), e->degree);
    }
    return e;
}

// ---------------------------------------------------------------------------
// Printing

inline std::string format_number(double x) {
    if (x == std::round(x) && std::abs(x) < 1e15) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.0f", x);
        return buf;
    }
    char buf[64];
    for (int prec = 1; prec <= 17; ++prec) {
        std::snprintf(buf, sizeof buf, "%.*g", prec, x);
        if (std::strtod(buf, nullptr) == x) break;
    }
    std::string s = buf;
    // Exponent notation is not part of the grammar; expand it.
    if (s.find('e') != std::string::npos) {
        std::snprintf(buf, sizeof buf, "%.17f", x);
        s = buf;
        while (!s.empty() && s.back() == '0') s.pop_back();
        if (!s.empty() && s.back() == '.') s.pop_back();
    }
    return s;
}

inline int precedence(const Expr& e) {
    switch (e->op) {
        case Op::Add:
        case Op::Sub: return 1;
        case Op::Mul:
        case Op::Div: return 2;
        case Op::Neg: return 3;
        case Op::Pow: return 4;
        case Op::Const: {
            cplx c = e->value;
            if (c.imag() != 0.0 && c.real() != 0.0) return 5;  // printed in parentheses
            if (c.imag() != 0.0) return c.imag() == 1.0 ? 5 : (c.imag() < 0 ? 3 : 2);
            return c.real() < 0.0 ? 3 : 5;
        }
        default: return 5;
    }
}

inline std::string var_name(Var v) {
    switch (v.kind) {
        case VarKind::T: return "t";
        case VarKind::Tau: return "tau";
        case VarKind::X: return "x" + std::to_string(v.index + 1);
        case VarKind::Xi: return "xi" + std::to_string(v.index + 1);
        case VarKind::V: return "v" + std::to_string(v.index);
    }
    return "?";
}

inline std::string to_string(const Expr& e);

inline std::string const_string(cplx c) {
    if (c.imag() == 0.0) return format_number(c.real());
    std::string im = c.imag() == 1.0 ? "i" : (c.imag() == -1.0 ? "-i" : format_number(c.imag()) + "*i");
    if (c.real() == 0.0) return im;
    std::string re = format_number(c.real());
    return "(" + re + (c.imag() < 0 ? "-" : "+") +
           (std::abs(c.imag()) == 1.0 ? std::string("i") : format_number(std::abs(c.imag())) + "*i") + ")";
}

inline std::string wrap(const Expr& e, bool paren) { return paren ? "(" + to_string(e) + ")" : to_string(e); }

inline std::string to_string(const Expr& e) {
    switch (e->op) {
        case Op::Const: return const_string(e->value);
        case Op::Var: return var_name(e->var);
        case Op::AbsXi: return "absxi";
        case Op::Add: return wrap(e->a, precedence(e->a) < 1) + "+" + wrap(e->b, precedence(e->b) <= 1 || precedence(e->b) == 3);
        case Op::Sub: return wrap(e->a, precedence(e->a) < 1) + "-" + wrap(e->b, precedence(e->b) <= 1 || precedence(e->b) == 3);
        case Op::Mul: return wrap(e->a, precedence(e->a) < 2) + "*" + wrap(e->b, precedence(e->b) < 2);
        case Op::Div: return wrap(e->a, precedence(e->a) < 2) + "/" + wrap(e->b, precedence(e->b) <= 3);
        case Op::Neg: return "-" + wrap(e->a, precedence(e->a) <= 3);
        case Op::Pow: return wrap(e->a, precedence(e->a) <= 4) + "^" + wrap(e->b, precedence(e->b) < 4);
        case Op::Sin: return "sin(" + to_string(e->a) + ")";
        case Op::Cos: return "cos(" + to_string(e->a) + ")";
        case Op::Exp: return "exp(" + to_string(e->a) + ")";
        case Op::Step:
            return e->deriv == 0 ? "step(" + to_string(e->a) + ")"
                                 : "step(" + to_string(e->a) + "," + std::to_string(e->deriv) + ")";
        case Op::Hom: return "hom(" + to_string(e->a) + "," + format_number(e->degree) + ")";
    }
    return "?";
}

// ---------------------------------------------------------------------------
// Parsing

class Parser {
public:
    explicit Parser(std::string_view text) : s_(text) {}

    Expr parse_expression() {
        Expr e = expr();
        skip_ws();
        return e;
    }
    std::size_t pos() const { return i_; }
    std::string_view rest() const { return s_.substr(i_); }

private:
    std::string_view s_;
    std::size_t i_ = 0;
    std::size_t last_tok_ = 0;

    [[noreturn]] void fail(const std::string& msg, std::size_t at) const { throw ParseError(msg, int(at) + 1); }
    void skip_ws() {
        while (i_ < s_.size() && std::isspace(static_cast<unsigned char>(s_[i_]))) ++i_;
    }
    bool peek(char c) {
        skip_ws();
        return i_ < s_.size() && s_[i_] == c;
    }
    bool accept(char c) {
        if (!peek(c)) return false;
        last_tok_ = i_;
        ++i_;
        return true;
    }
    bool at_end() {
        skip_ws();
        return i_ >= s_.size() || s_[i_] == ';';
    }
    [[noreturn]] void fail_here(const std::string& msg) {
        if (at_end()) fail("unexpected end of input: " + msg, last_tok_);
        fail("unexpected '" + std::string(1, s_[i_]) + "': " + msg, i_);
    }

    Expr expr() {
        Expr e = term();
        for (;;) {
            if (accept('+')) e = add(e, term());
            else if (accept('-')) e = sub(e, term());
            else return e;
        }
    }
    Expr term() {
        Expr e = unary();
        for (;;) {
            if (accept('*')) e = mul(e, unary());
            else if (accept('/')) e = div(e, unary());
            else return e;
        }
    }
    Expr unary() {
        if (accept('-')) return neg(unary());
        if (accept('+')) return unary();
        return power();
    }
    Expr power() {
        Expr base = primary();
        if (accept('^')) return pow(base, unary());
        return base;
    }
    Expr primary() {
        skip_ws();
        if (i_ >= s_.size() || s_[i_] == ';') fail_here("expected an operand");
        char c = s_[i_];
        if (accept('(')) {
            Expr e = expr();
            if (!accept(')')) fail_here("expected ')'");
            return e;
        }
        if (std::isdigit(static_cast<unsigned char>(c)) || c == '.') return number();
        if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') return name();
        fail_here("expected an operand");
    }
    Expr number() {
        std::size_t start = i_;
        while (i_ < s_.size() && (std::isdigit(static_cast<unsigned char>(s_[i_])) || s_[i_] == '.')) ++i_;
        last_tok_ = start;
        std::string tok(s_.substr(start, i_ - start));
        char* end = nullptr;
        double v = std::strtod(tok.c_str(), &end);
        if (end != tok.c_str() + tok.size()) fail("malformed number '" + tok + "'", start);
        return constant(v);
    }
    Expr name() {
        std::size_t start = i_;
        while (i_ < s_.size() && (std::isalnum(static_cast<unsigned char>(s_[i_])) || s_[i_] == '_')) ++i_;
        last_tok_ = start;
        std::string id(s_.substr(start, i_ - start));
        if (peek('(')) return call(id, start);
        if (id == "t") return variable(var_t());
        if (id == "tau") return variable(var_tau());
        if (id == "i") return constant(cplx(0.0, 1.0));
        if (id == "pi") return constant(std::numbers::pi);
        if (id == "absxi") return absxi();
        auto indexed = [&](std::string_view prefix, int lo, int hi) -> std::optional<int> {
            if (id.size() <= prefix.size() || id.compare(0, prefix.size(), prefix) != 0) return std::nullopt;
            int k = 0;
            auto [p, ec] = std::from_chars(id.data() + prefix.size(), id.data() + id.size(), k);
            if (ec != std::errc() || p != id.data() + id.size() || k < lo || k > hi) return std::nullopt;
            return k;
        };
        if (auto k = indexed("xi", 1, 2)) return variable(var_xi(*k - 1));
        if (auto k = indexed("x", 1, 2)) return variable(var_x(*k - 1));
        if (auto k = indexed("v", 0, 63)) return variable(var_v(*k));
        fail("unknown identifier '" + id + "'", start);
    }
    Expr call(const std::string& id, std::size_t start) {
        accept('(');
        std::vector<Expr> args{expr()};
        while (accept(',')) args.push_back(expr());
        if (!accept(')')) fail_here("expected ')' closing call to " + id);
        auto need = [&](std::size_t n) {
            if (args.size() != n) fail(id + " expects " + std::to_string(n) + " argument(s)", start);
        };
        auto const_arg = [&](const Expr& e) {
            if (!is_const(e) || e->value.imag() != 0.0) fail(id + " expects a real constant argument", start);
            return e->value.real();
        };
        if (id == "sin") { need(1); return func(Op::Sin, args[0]); }
        if (id == "cos") { need(1); return func(Op::Cos, args[0]); }
        if (id == "exp") { need(1); return func(Op::Exp, args[0]); }
        if (id == "step") {
            if (args.size() == 1) return func(Op::Step, args[0]);
            need(2);
            return func(Op::Step, args[0], int(const_arg(args[1])));
        }
        if (id == "hom") { need(2); return hom(args[0], const_arg(args[1])); }
        fail("unknown function '" + id + "'", start);
    }
};

}  // namespace expr

// ---------------------------------------------------------------------------
// Symbols

// Term alpha(position) * beta(frequency) of a separable symbol.
struct SeparableTerm {
    std::function<cplx(const EvalPoint&)> position;
    std::function<cplx(const EvalPoint&)> frequency;
};

class Symbol {
public:
    using NativeFn = std::function<cplx(const EvalPoint&)>;

    Symbol() : Symbol(expr::constant(0.0), 0.0, std::nullopt, false, false) {}

    // Expression-backed symbol; runs the sampled metadata checks when verify is set.
    Symbol(Expr e, double order, std::optional<double> hom_degree, bool real_symbol, bool verify = true)
        : expr_(std::move(e)), order_(order), hom_(hom_degree), real_(real_symbol) {
        expr::collect_usage(expr_, usage_);
        if (verify) check_metadata();
    }

    // Native (tabulated / procedural) backend.
    static Symbol native(NativeFn fn, std::string name, double order, std::optional<double> hom_degree,
                         bool real_symbol, expr::Usage usage) {
        Symbol s;
        s.expr_ = nullptr;
        s.native_ = std::make_shared<const NativeFn>(std::move(fn));
        s.name_ = std::move(name);
        s.order_ = order;
        s.hom_ = hom_degree;
        s.real_ = real_symbol;
        s.usage_ = usage;
        return s;
    }

    static Symbol constant(cplx c) { return Symbol(expr::constant(c), 0.0, std::nullopt, c.imag() == 0.0, false); }

    cplx eval(const EvalPoint& p) const {
        if (native_) return (*native_)(p);
        return expr::eval(*expr_, p);
    }
    cplx operator()(const EvalPoint& p) const { return eval(p); }

    bool is_expression() const { return expr_ != nullptr; }
    const Expr& expression() const { return expr_; }
    double order() const { return order_; }
    std::optional<double> homogeneous_degree() const { return hom_; }
    bool real_symbol() const { return real_; }
    int jet_arity() const { return usage_.jet_arity; }
    const expr::Usage& usage() const { return usage_; }
    int space_dims() const { return std::max(usage_.x_dims, usage_.xi_dims); }

    void set_separable(std::vector<SeparableTerm> terms) {
        separable_ = std::make_shared<const std::vector<SeparableTerm>>(std::move(terms));
    }
    // Sum of position x frequency products when the structure admits one.
    std::optional<std::vector<SeparableTerm>> separable_terms() const;

    std::string str() const {
        std::string body = expr_ ? expr::to_string(expr_) : name_;
        std::string s = body + "; order=" + expr::format_number(order_);
        if (hom_) s += "; homogeneous=" + expr::format_number(*hom_);
        if (real_) s += "; real=true";
        return s;
    }
    std::string expression_string() const { return expr_ ? expr::to_string(expr_) : name_; }

    // Sampled verification of homogeneity and the real-symbol condition.
    void check_metadata() const;

private:
    Expr expr_;
    std::shared_ptr<const NativeFn> native_;
    std::shared_ptr<const std::vector<SeparableTerm>> separable_;
    std::string name_;
    double order_ = 0.0;
    std::optional<double> hom_;
    bool real_ = false;
    expr::Usage usage_;
};

namespace detail {

struct SampleSet {
    std::vector<EvalPoint> points;
    std::vector<std::vector<cplx>> jets;
};

inline SampleSet metadata_samples(const expr::Usage& u, unsigned seed, int count) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(-1.0, 1.0), pos(0.0, two_pi), rad(1.0, 12.0);
    SampleSet s;
    s.jets.resize(count);
    const int nfreq = (u.tau ? 1 : 0) + std::max(u.xi_dims, 1);
    for (int k = 0; k < count; ++k) {
        EvalPoint p;
        p.t = unit(rng);
        p.x = {pos(rng), pos(rng)};
        std::array<double, 3> w{};
        double nn = 0;
        for (int j = 0; j < nfreq; ++j) {
            w[j] = unit(rng);
            nn += w[j] * w[j];
        }
        nn = std::sqrt(nn);
        double r = rad(rng);
        int j = 0;
        if (u.tau) p.tau = r * w[j++] / nn;
        for (int d = 0; d < std::max(u.xi_dims, 1); ++d) p.xi[d] = r * w[j++] / nn;
        s.jets[k].resize(u.jet_arity);
        for (auto& v : s.jets[k]) v = unit(rng);
        s.points.push_back(p);
    }
    return s;
}

inline EvalPoint scaled_freq(EvalPoint p, double lambda) {
    p.tau *= lambda;
    p.xi[0] *= lambda;
    p.xi[1] *= lambda;
    return p;
}

}  // namespace detail

inline void Symbol::check_metadata() const {
    auto samples = detail::metadata_samples(usage_, 0x5eedULL, 64);
    for (std::size_t k = 0; k < samples.points.size(); ++k) {
        EvalPoint p = samples.points[k];
        p.jet = samples.jets[k];
        cplx base;
        try {
            base = eval(p);
        } catch (const DomainError&) {
            continue;
        }
        if (hom_) {
            for (double lambda : {2.0, 3.7}) {
                cplx scaled = eval(detail::scaled_freq(p, lambda));
                cplx expect = std::pow(lambda, *hom_) * base;
                if (std::abs(scaled - expect) > 1e-10 * std::max(1.0, std::abs(expect)))
                    throw ConstructionError("symbol '" + expression_string() + "' is not homogeneous of degree " +
                                            expr::format_number(*hom_));
            }
        }
        if (real_) {
            cplx mirrored = std::conj(eval(detail::scaled_freq(p, -1.0)));
            if (std::abs(base - mirrored) > 1e-12 * std::max(1.0, std::abs(base)))
                throw ConstructionError("symbol '" + expression_string() + "' violates p(xi) = conj p(-xi)");
        }
    }
}

namespace detail {

// Factorization of a subtree into a sum of (position factor) * (frequency factor).
struct SepTerm {
    Expr pos, freq;
};

enum class Purity { Constant, Position, Frequency, Mixed };

inline Purity purity(const Expr& e) {
    bool has_pos = false, has_freq = false;
    std::function<void(const Expr&)> walk = [&](const Expr& n) {
        switch (n->op) {
            case Op::Var: (n->var.is_frequency() ? has_freq : has_pos) = true; break;
            case Op::AbsXi:
            case Op::Hom: has_freq = true; break;
            default: break;
        }
        if (n->a) walk(n->a);
        if (n->b) walk(n->b);
    };
    walk(e);
    if (has_pos && has_freq) return Purity::Mixed;
    if (has_pos) return Purity::Position;
    if (has_freq) return Purity::Frequency;
    return Purity::Constant;
}

inline std::optional<std::vector<SepTerm>> separate(const Expr& e, std::size_t cap) {
    using namespace expr;
    Purity pu = purity(e);
    if (pu == Purity::Constant || pu == Purity::Position) return std::vector<SepTerm>{{e, constant(1.0)}};
    if (pu == Purity::Frequency) return std::vector<SepTerm>{{constant(1.0), e}};
    switch (e->op) {
        case Op::Add:
        case Op::Sub: {
            auto l = separate(e->a, cap), r = separate(e->b, cap);
            if (!l || !r) return std::nullopt;
            for (auto& t : *r) {
                if (e->op == Op::Sub) t.pos = neg(t.pos);
                l->push_back(t);
            }
            if (l->size() > cap) return std::nullopt;
            return l;
        }
        case Op::Neg: {
            auto l = separate(e->a, cap);
            if (!l) return std::nullopt;
            for (auto& t : *l) t.pos = neg(t.pos);
            return l;
        }
        case Op::Mul: {
            auto l = separate(e->a, cap), r = separate(e->b, cap);
            if (!l || !r || l->size() * r->size() > cap) return std::nullopt;
            std::vector<SepTerm> out;
            for (auto& a : *l)
                for (auto& b : *r) out.push_back({mul(a.pos, b.pos), mul(a.freq, b.freq)});
            return out;
        }
        case Op::Div: {
            Purity pd = purity(e->b);
            if (pd == Purity::Mixed) return std::nullopt;
            auto l = separate(e->a, cap);
            if (!l) return std::nullopt;
            for (auto& t : *l) {
                if (pd == Purity::Frequency) t.freq = div(t.freq, e->b);
                else t.pos = div(t.pos, e->b);
            }
            return l;
        }
        case Op::Pow: {
            if (!is_const(e->b) || e->b->value.imag() != 0.0) return std::nullopt;
            double k = e->b->value.real();
            if (k != std::round(k) || k < 0 || k > 6) return std::nullopt;
            std::optional<std::vector<SepTerm>> acc = std::vector<SepTerm>{{constant(1.0), constant(1.0)}};
            auto base = separate(e->a, cap);
            if (!base) return std::nullopt;
            for (int j = 0; j < int(k); ++j) {
                if (acc->size() * base->size() > cap) return std::nullopt;
                std::vector<SepTerm> out;
                for (auto& a : *acc)
                    for (auto& b : *base) out.push_back({mul(a.pos, b.pos), mul(a.freq, b.freq)});
                acc = std::move(out);
            }
            return acc;
        }
        default: return std::nullopt;
    }
}

}  // namespace detail

inline std::optional<std::vector<SeparableTerm>> Symbol::separable_terms() const {
    if (separable_) return *separable_;
    if (!expr_) return std::nullopt;
    auto terms = detail::separate(expr_, 64);
    if (!terms) return std::nullopt;
    std::vector<SeparableTerm> out;
    for (auto& t : *terms) {
        if (expr::is_const(t.pos, 0) || expr::is_const(t.freq, 0)) continue;
        Expr pe = t.pos, fe = t.freq;
        out.push_back({[pe](const EvalPoint& p) { return expr::eval(*pe, p); },
                       [fe](const EvalPoint& p) { return expr::eval(*fe, p); }});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Parsing with attributes

inline Symbol parse_symbol(std::string_view text) {
    expr::Parser parser(text);
    Expr e = parser.parse_expression();
    std::size_t at = parser.pos();
    std::optional<double> order;
    std::optional<double> hom;
    bool real = false;
    auto trim = [](std::string_view s) {
        while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
        while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
        return s;
    };
    if (at < text.size() && text[at] != ';') throw ParseError("unexpected '" + std::string(1, text[at]) + "'", int(at) + 1);
    while (at < text.size()) {
        // text[at] == ';'
        std::size_t next = text.find(';', at + 1);
        std::string_view item = text.substr(at + 1, next == std::string_view::npos ? std::string_view::npos : next - at - 1);
        std::size_t eq = item.find('=');
        std::string_view key = trim(item.substr(0, eq));
        if (key.empty() && eq == std::string_view::npos) {
            at = next == std::string_view::npos ? text.size() : next;
            continue;
        }
        if (eq == std::string_view::npos) throw ParseError("attribute '" + std::string(key) + "' needs '='", int(at) + 2);
        std::string value(trim(item.substr(eq + 1)));
        auto as_number = [&]() {
            char* end = nullptr;
            double v = std::strtod(value.c_str(), &end);
            if (value.empty() || end != value.c_str() + value.size())
                throw ParseError("attribute '" + std::string(key) + "' expects a number", int(at) + 2);
            return v;
        };
        if (key == "order") {
            order = as_number();
        } else if (key == "homogeneous") {
            if (value == "true") hom = std::numeric_limits<double>::quiet_NaN();
            else if (value == "false") hom.reset();
            else hom = as_number();
        } else if (key == "real") {
            if (value != "true" && value != "false") throw ParseError("attribute 'real' expects true or false", int(at) + 2);
            real = value == "true";
        } else {
            throw ParseError("unknown attribute '" + std::string(key) + "'", int(at) + 2);
        }
        at = next == std::string_view::npos ? text.size() : next;
    }
    if (!order) throw ParseError("missing order attribute", int(text.size()));
    if (hom && std::isnan(*hom)) hom = *order;
    return Symbol(e, *order, hom, real);
}

inline Symbol parse_expression_symbol(std::string_view text, double order, std::optional<double> hom = std::nullopt,
                                      bool real = false) {
    expr::Parser parser(text);
    Expr e = parser.parse_expression();
    if (parser.pos() != text.size()) throw ParseError("trailing input", int(parser.pos()) + 1);
    return Symbol(e, order, hom, real);
}

inline cplx eval_symbol(const Symbol& p, std::span<const cplx> jet, double t, Point x, std::array<double, 2> xi,
                        double tau = 0.0) {
    if (int(jet.size()) < p.jet_arity()) throw DomainError("jet shorter than the symbol's jet arity");
    EvalPoint e;
    e.t = t;
    e.x = x;
    e.xi = xi;
    e.tau = tau;
    e.jet = jet;
    return p.eval(e);
}

// Central-difference derivative used for native backends.
inline Symbol numeric_derivative(const Symbol& p, Var v) {
    double order = p.order() - (v.is_frequency() ? 1.0 : 0.0);
    auto hom = p.homogeneous_degree();
    if (hom && v.is_frequency()) *hom -= 1.0;
    if (v.kind == VarKind::V) {
        int k = v.index;
        return Symbol::native(
            [p, k](const EvalPoint& q) {
                std::vector<cplx> jp(q.jet.begin(), q.jet.end()), jm = jp;
                const double h = 1e-6;
                jp[k] += h;
                jm[k] -= h;
                EvalPoint a = q, b = q;
                a.jet = jp;
                b.jet = jm;
                return (p.eval(a) - p.eval(b)) / (2 * h);
            },
            "d(" + p.expression_string() + ")", order, hom, false, p.usage());
    }
    return Symbol::native(
        [p, v](const EvalPoint& q) {
            double scale = v.is_frequency() ? std::max(1.0, std::sqrt(q.freq_norm2())) : 1.0;
            double h = 1e-5 * scale;
            EvalPoint a = q, b = q;
            a.set(v, q.get(v) + h);
            b.set(v, q.get(v) - h);
            return (p.eval(a) - p.eval(b)) / (2 * h);
        },
        "d(" + p.expression_string() + ")", order, hom, false, p.usage());
}

inline Symbol differentiate_symbol(const Symbol& p, Var v) {
    if (!p.is_expression()) return numeric_derivative(p, v);
    Expr d = expr::diff(p.expression(), v);
    double order = p.order();
    auto hom = p.homogeneous_degree();
    if (v.is_frequency()) {
        order -= 1.0;
        if (hom) *hom -= 1.0;
    }
    // The derivative of a real symbol in a frequency variable is real up to a factor i.
    return Symbol(d, order, hom, false, false);
}

// Expression-level arithmetic on symbols (metadata combined conservatively).
inline Symbol symbol_product(const Symbol& a, const Symbol& b) {
    std::optional<double> hom;
    if (a.homogeneous_degree() && b.homogeneous_degree()) hom = *a.homogeneous_degree() + *b.homogeneous_degree();
    if (a.is_expression() && b.is_expression())
        return Symbol(expr::mul(a.expression(), b.expression()), a.order() + b.order(), hom,
                      a.real_symbol() && b.real_symbol(), false);
    expr::Usage u = a.usage();
    const auto& ub = b.usage();
    u.t |= ub.t;
    u.tau |= ub.tau;
    u.x_dims = std::max(u.x_dims, ub.x_dims);
    u.xi_dims = std::max(u.xi_dims, ub.xi_dims);
    u.jet_arity = std::max(u.jet_arity, ub.jet_arity);
    return Symbol::native([a, b](const EvalPoint& p) { return a.eval(p) * b.eval(p); },
                          "(" + a.expression_string() + ")*(" + b.expression_string() + ")", a.order() + b.order(), hom,
                          a.real_symbol() && b.real_symbol(), u);
}

inline Symbol symbol_scale(const Symbol& a, cplx c) {
    if (a.is_expression())
        return Symbol(expr::mul(expr::constant(c), a.expression()), a.order(), a.homogeneous_degree(),
                      a.real_symbol() && c.imag() == 0.0, false);
    return Symbol::native([a, c](const EvalPoint& p) { return c * a.eval(p); }, a.expression_string(), a.order(),
                          a.homogeneous_degree(), a.real_symbol() && c.imag() == 0.0, a.usage());
}

// weight * a(s t, x, tau / s, xi): the symbol in the time variable t' = t / s.
inline Symbol rescale_time(const Symbol& a, double s, double weight) {
    if (!(s > 0.0)) throw ConfigError("time scale must be positive");
    if (a.is_expression() && !a.usage().absxi && !a.usage().hom) {
        Expr e = expr::substitute(a.expression(), [s](Var v) -> Expr {
            if (v.kind == VarKind::T) return expr::mul(expr::constant(s), expr::variable(v));
            if (v.kind == VarKind::Tau) return expr::mul(expr::constant(1.0 / s), expr::variable(v));
            return nullptr;
        });
        return Symbol(expr::mul(expr::constant(weight), e), a.order(), a.homogeneous_degree(), a.real_symbol(), false);
    }
    return Symbol::native(
        [a, s, weight](const EvalPoint& p) {
            EvalPoint q = p;
            q.t = s * p.t;
            q.tau = p.tau / s;
            return weight * a.eval(q);
        },
        a.expression_string(), a.order(), a.homogeneous_degree(), a.real_symbol(), a.usage());
}

// ---------------------------------------------------------------------------
// Numerical symbol-class seminorm

struct SeminormSamples {
    int spatial_dims = 1;     // number of x / xi coordinates
    bool include_tau = false; // sample tau as an extra frequency coordinate
    int freq_radius = 32;     // lattice box [-R, R]^k
    int freq_stride = 1;
    int x_points = 8;         // x samples per dimension
    double fd_step = 0.0;     // 0 = grid resolution 2 pi / 64
    std::vector<std::vector<cplx>> jets{{}};
    double t = 0.0;
};

inline double estimate_seminorm(const Symbol& p, double m, int max_order, const SeminormSamples& spec = {}) {
    if (max_order < 0 || max_order > 4) throw DomainError("seminorm order must lie in [0, 4]");
    std::vector<Var> fvars, xvars;
    if (spec.include_tau) fvars.push_back(var_tau());
    for (int d = 0; d < spec.spatial_dims; ++d) {
        fvars.push_back(var_xi(d));
        xvars.push_back(var_x(d));
    }
    const double h = spec.fd_step > 0 ? spec.fd_step : two_pi / 64.0;

    // All frequency multi-indices up to max_order, with their derivative symbols.
    std::vector<std::pair<std::vector<int>, Symbol>> fderivs;
    std::function<void(std::vector<int>, Symbol, int, int)> build = [&](std::vector<int> alpha, Symbol s, int first, int total) {
        fderivs.emplace_back(alpha, s);
        if (total == max_order) return;
        for (std::size_t j = first; j < fvars.size(); ++j) {
            auto a = alpha;
            ++a[j];
            build(a, differentiate_symbol(s, fvars[j]), int(j), total + 1);
        }
    };
    build(std::vector<int>(fvars.size(), 0), p, 0, 0);

    // Nested centered differences in x for multi-index beta.
    std::function<cplx(const Symbol&, EvalPoint, std::vector<int>)> dx = [&](const Symbol& s, EvalPoint q, std::vector<int> beta) -> cplx {
        for (std::size_t j = 0; j < beta.size(); ++j) {
            if (beta[j] == 0) continue;
            --beta[j];
            EvalPoint a = q, b = q;
            a.set(xvars[j], q.get(xvars[j]) + h);
            b.set(xvars[j], q.get(xvars[j]) - h);
            return (dx(s, a, beta) - dx(s, b, beta)) / (2.0 * h);
        }
        return s.eval(q);
    };
    std::vector<std::vector<int>> betas;
    std::function<void(std::vector<int>, int, int)> build_beta = [&](std::vector<int> beta, int first, int total) {
        betas.push_back(beta);
        if (total == max_order) return;
        for (std::size_t j = first; j < xvars.size(); ++j) {
            auto b = beta;
            ++b[j];
            build_beta(b, int(j), total + 1);
        }
    };
    build_beta(std::vector<int>(xvars.size(), 0), 0, 0);

    double best = 0.0;
    const int R = spec.freq_radius, st = std::max(1, spec.freq_stride);
    std::vector<int> f(fvars.size(), -R);
    std::vector<Point> xs;
    for (int a = 0; a < spec.x_points; ++a)
        for (int b = 0; b < (spec.spatial_dims == 2 ? spec.x_points : 1); ++b)
            xs.push_back({two_pi * a / spec.x_points, two_pi * b / spec.x_points});
    for (const auto& jet : spec.jets) {
        for (;;) {
            EvalPoint q;
            q.t = spec.t;
            q.jet = jet;
            for (std::size_t j = 0; j < fvars.size(); ++j) q.set(fvars[j], f[j]);
            const double bracket = std::sqrt(1.0 + q.freq_norm2());
            for (const auto& x : xs) {
                q.x = x;
                for (auto& [alpha, s] : fderivs) {
                    int na = 0;
                    for (int a : alpha) na += a;
                    for (auto& beta : betas) {
                        int nb = 0;
                        for (int b : beta) nb += b;
                        if (na + nb > max_order) continue;
                        cplx v;
                        try {
                            v = dx(s, q, beta);
                        } catch (const DomainError&) {
                            continue;
                        }
                        best = std::max(best, std::abs(v) * std::pow(bracket, na - m));
                    }
                }
            }
            std::size_t j = 0;
            for (; j < f.size(); ++j) {
                f[j] += st;
                if (f[j] <= R) break;
                f[j] = -R;
            }
            if (j == f.size()) break;
        }
    }
    return best;
}

}  // namespace microsolve
