#include "phar/btmodel.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <map>
#include <numeric>
#include <sstream>

namespace phar {

namespace {

void validate_matrix(const std::vector<std::string>& methods,
                     const std::vector<std::vector<double>>& wins) {
    const size_t n = methods.size();
    if (n < 2) throw_value("bt_fit: need at least two methods");
    if (wins.size() != n) throw_value("bt_fit: win matrix row count mismatch");
    for (size_t i = 0; i < n; ++i) {
        if (wins[i].size() != n) throw_value("bt_fit: win matrix is not square");
        for (size_t j = 0; j < n; ++j) {
            if (wins[i][j] < 0.0) throw_value("bt_fit: negative win count");
            if (i == j && wins[i][j] != 0.0)
                throw_value("bt_fit: diagonal of the win matrix must be zero");
        }
    }
    for (size_t i = 0; i < n; ++i) {
        double total = 0.0;
        for (size_t j = 0; j < n; ++j) total += wins[i][j] + wins[j][i];
        if (total == 0.0)
            throw_value("bt_fit: method '" + methods[i] + "' has zero total games");
    }
    // connectivity of the comparison graph
    std::vector<size_t> root(n);
    std::iota(root.begin(), root.end(), 0);
    std::function<size_t(size_t)> find = [&](size_t x) {
        while (root[x] != x) x = root[x] = root[root[x]];
        return x;
    };
    for (size_t i = 0; i < n; ++i)
        for (size_t j = i + 1; j < n; ++j)
            if (wins[i][j] + wins[j][i] > 0.0) root[find(i)] = find(j);
    std::map<size_t, std::vector<std::string>> components;
    for (size_t i = 0; i < n; ++i) components[find(i)].push_back(methods[i]);
    if (components.size() > 1) {
        std::string msg = "bt_fit: comparison graph is disconnected; components:";
        for (auto& [r, names] : components) {
            msg += " {";
            for (size_t k = 0; k < names.size(); ++k) msg += (k ? "," : "") + names[k];
            msg += "}";
        }
        throw_value(msg);
    }
}

}  // namespace

std::vector<std::vector<double>> bt_augment(const std::vector<std::vector<double>>& wins,
                                            double pseudo_fraction) {
    const size_t n = wins.size();
    auto out = wins;
    for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < n; ++j) {
            if (i == j) continue;
            const double t = wins[i][j] + wins[j][i];
            if (t > 0.0) out[i][j] += pseudo_fraction * t;
        }
    return out;
}

double bt_log_likelihood(const std::vector<std::vector<double>>& augmented_wins,
                         const std::vector<double>& scores) {
    const size_t n = augmented_wins.size();
    double ll = 0.0;
    for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < n; ++j) {
            if (i == j || augmented_wins[i][j] <= 0.0) continue;
            // P(i beats j) = exp(s_i) / (exp(s_i) + exp(s_j))
            ll += augmented_wins[i][j] *
                  (scores[i] - std::log(std::exp(scores[i]) + std::exp(scores[j])));
        }
    return ll;
}

BtResult bt_fit(const std::vector<std::string>& methods,
                const std::vector<std::vector<double>>& wins, const BtOptions& opt) {
    validate_matrix(methods, wins);
    const size_t n = methods.size();
    const auto w = bt_augment(wins, opt.pseudo_fraction);

    std::vector<double> total_wins(n, 0.0);
    for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < n; ++j) total_wins[i] += w[i][j];

    std::vector<double> p(n, 1.0), next(n);
    int iter = 0;
    for (; iter < opt.max_iterations; ++iter) {
        double max_rel = 0.0;
        for (size_t i = 0; i < n; ++i) {
            double denom = 0.0;
            for (size_t j = 0; j < n; ++j) {
                if (i == j) continue;
                const double t = w[i][j] + w[j][i];
                if (t > 0.0) denom += t / (p[i] + p[j]);
            }
            next[i] = total_wins[i] / denom;
        }
        // normalize to geometric mean 1
        double log_sum = 0.0;
        for (double v : next) log_sum += std::log(v);
        const double scale = std::exp(log_sum / static_cast<double>(n));
        for (size_t i = 0; i < n; ++i) {
            next[i] /= scale;
            max_rel = std::max(max_rel, std::abs(next[i] - p[i]) / std::max(p[i], 1e-300));
        }
        p = next;
        if (max_rel < opt.tolerance) {
            ++iter;
            break;
        }
    }

    BtResult r;
    r.methods = methods;
    r.iterations = iter;
    r.pseudo_fraction = opt.pseudo_fraction;
    r.scores.resize(n);
    double mean = 0.0;
    for (size_t i = 0; i < n; ++i) {
        r.scores[i] = std::log(p[i]);
        mean += r.scores[i];
    }
    mean /= static_cast<double>(n);
    for (double& s : r.scores) s -= mean;
    return r;
}

std::pair<std::vector<std::string>, std::vector<std::vector<double>>> parse_pairwise(
    std::istream& in) {
    std::vector<std::string> methods;
    std::map<std::string, size_t> index;
    auto method_id = [&](const std::string& name) {
        auto it = index.find(name);
        if (it != index.end()) return it->second;
        index[name] = methods.size();
        methods.push_back(name);
        return methods.size() - 1;
    };
    struct Rec {
        size_t a, b;
        double wa, wb;
    };
    std::vector<Rec> recs;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        std::istringstream ss(line);
        std::string tag;
        if (!(ss >> tag)) continue;
        if (tag != "PAIR")
            throw_format("pairwise input line " + std::to_string(lineno) +
                         ": expected 'PAIR', got '" + tag + "'");
        std::string a, b;
        double wa, wb;
        if (!(ss >> a >> b >> wa >> wb))
            throw_format("pairwise input line " + std::to_string(lineno) +
                         ": expected PAIR <i> <j> <wins_i> <wins_j>");
        recs.push_back({method_id(a), method_id(b), wa, wb});
    }
    std::vector<std::vector<double>> wins(methods.size(),
                                          std::vector<double>(methods.size(), 0.0));
    for (const Rec& r : recs) {
        wins[r.a][r.b] += r.wa;
        wins[r.b][r.a] += r.wb;
    }
    return {methods, wins};
}

}  // namespace phar
