#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "phar/common.hpp"

namespace phar {

struct BtOptions {
    double tolerance = 1e-9;
    int max_iterations = 10000;
    // Regularizing pseudo-wins added per ordered pair as a fraction of that
    // pair's total games, so shutouts stay finite and scaling every count by
    // a constant leaves the fit unchanged. 0.05 adds the customary 0.5
    // pseudo-win to a 10-game pair.
    double pseudo_fraction = 0.05;
};

struct BtResult {
    std::vector<std::string> methods;
    std::vector<double> scores;  // log-strengths, normalized to zero mean
    int iterations = 0;
    double pseudo_fraction = 0.0;  // for disclosure in reports
};

// Maximum-likelihood Bradley-Terry strengths from a pairwise win matrix
// (wins[i][j] = wins of i over j), fitted by minorization-maximization
// fixed-point updates. The comparison graph must be connected and every
// method must have played at least one game.
BtResult bt_fit(const std::vector<std::string>& methods,
                const std::vector<std::vector<double>>& wins, const BtOptions& opt = {});

// Parses "PAIR <method_i> <method_j> <wins_i> <wins_j>" lines ('#' comments)
// into a method list and win matrix.
std::pair<std::vector<std::string>, std::vector<std::vector<double>>> parse_pairwise(
    std::istream& in);

// Log-likelihood of the (pseudo-count augmented) data under given scores;
// exposed so an independent grid-search oracle can target the same objective.
double bt_log_likelihood(const std::vector<std::vector<double>>& augmented_wins,
                         const std::vector<double>& scores);

// The pseudo-count augmentation used by bt_fit.
std::vector<std::vector<double>> bt_augment(const std::vector<std::vector<double>>& wins,
                                            double pseudo_fraction);

}  // namespace phar
