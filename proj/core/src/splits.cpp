#include <algorithm>
#include <cmath>
#include <map>
#include <random>

#include "echoreg/data.hpp"

namespace echoreg {

std::string patient_of(const std::string& case_id) { return case_id.substr(0, case_id.find('_')); }

Splits make_splits(const std::vector<std::string>& case_ids, std::array<double, 3> ratios, std::uint64_t seed) {
    for (double r : ratios) require(r >= 0.0, "make_splits: ratios must be non-negative");
    require(std::abs(ratios[0] + ratios[1] + ratios[2] - 1.0) < 1e-9, "make_splits: ratios must sum to 1");

    // Patients in order of first appearance.
    std::vector<std::string> patients;
    std::map<std::string, std::vector<std::size_t>> members;
    for (std::size_t i = 0; i < case_ids.size(); ++i) {
        const auto p = patient_of(case_ids[i]);
        auto& m = members[p];
        if (m.empty()) patients.push_back(p);
        m.push_back(i);
    }
    const std::size_t n = patients.size();
    const auto n_val = static_cast<std::size_t>(std::llround(ratios[1] * n));
    const auto n_test = static_cast<std::size_t>(std::llround(ratios[2] * n));
    if (n < 2 || n_val + n_test >= n) {
        throw ContractError("make_splits: too few patients (" + std::to_string(n) + ") for the requested ratios");
    }

    // Fisher-Yates with an explicit engine so the order is portable.
    std::mt19937_64 rng(seed);
    for (std::size_t i = n - 1; i > 0; --i) {
        const std::size_t j = static_cast<std::size_t>(rng() % (i + 1));
        std::swap(patients[i], patients[j]);
    }

    Splits s;
    for (std::size_t k = 0; k < n; ++k) {
        auto& dst = k < n_val ? s.val : k < n_val + n_test ? s.test : s.train;
        const auto& m = members[patients[k]];
        dst.insert(dst.end(), m.begin(), m.end());
    }
    for (auto* v : {&s.train, &s.val, &s.test}) std::sort(v->begin(), v->end());
    return s;
}

}  // namespace echoreg
