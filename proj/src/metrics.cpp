#include "earlyexit/metrics.hpp"

#include <algorithm>
#include <stdexcept>
#include <unordered_map>

namespace earlyexit {

namespace {

size_t lcs_length(std::span<const int> a, std::span<const int> b) {
    if (a.empty() || b.empty()) return 0;
    std::vector<size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
    for (size_t i = 1; i <= a.size(); ++i) {
        for (size_t j = 1; j <= b.size(); ++j) {
            cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
        }
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

size_t levenshtein(std::span<const int> a, std::span<const int> b) {
    std::vector<size_t> prev(b.size() + 1), cur(b.size() + 1);
    for (size_t j = 0; j <= b.size(); ++j) prev[j] = j;
    for (size_t i = 1; i <= a.size(); ++i) {
        cur[0] = i;
        for (size_t j = 1; j <= b.size(); ++j) {
            const size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
            cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
        }
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

}  // namespace

double token_f1(std::span<const int> candidate, std::span<const int> reference) {
    if (candidate.empty() && reference.empty()) return 1.0;
    if (candidate.empty() || reference.empty()) return 0.0;
    std::unordered_map<int, int> counts;
    for (int t : reference) ++counts[t];
    size_t common = 0;
    for (int t : candidate) {
        auto it = counts.find(t);
        if (it != counts.end() && it->second > 0) {
            --it->second;
            ++common;
        }
    }
    if (common == 0) return 0.0;
    const double p = static_cast<double>(common) / static_cast<double>(candidate.size());
    const double r = static_cast<double>(common) / static_cast<double>(reference.size());
    return 2.0 * p * r / (p + r);
}

double rouge_l(std::span<const int> candidate, std::span<const int> reference) {
    if (candidate.empty() && reference.empty()) return 1.0;
    const size_t lcs = lcs_length(candidate, reference);
    if (lcs == 0) return 0.0;
    const double p = static_cast<double>(lcs) / static_cast<double>(candidate.size());
    const double r = static_cast<double>(lcs) / static_cast<double>(reference.size());
    return 2.0 * p * r / (p + r);
}

double norm_edit_similarity(std::span<const int> candidate, std::span<const int> reference) {
    if (candidate.empty() && reference.empty()) return 1.0;
    const size_t longest = std::max(candidate.size(), reference.size());
    const double dist = static_cast<double>(levenshtein(candidate, reference));
    return 1.0 - dist / static_cast<double>(longest);
}

double similarity(MetricKind kind, std::span<const int> a, std::span<const int> b) {
    switch (kind) {
        case MetricKind::token_f1: return token_f1(a, b);
        case MetricKind::rouge_l: return rouge_l(a, b);
        case MetricKind::norm_edit_similarity: return norm_edit_similarity(a, b);
    }
    throw std::invalid_argument("similarity: unknown metric kind");
}

double risk(MetricKind kind, std::span<const int> a,
            const std::vector<TokenSeq>& reference_set) {
    if (reference_set.empty()) {
        throw std::invalid_argument("risk: reference set must be non-empty");
    }
    double best = 0.0;
    for (const auto& z : reference_set) best = std::max(best, similarity(kind, a, z));
    return 1.0 - best;
}

}  // namespace earlyexit
