#pragma once

// Bounded sequence similarity metrics in [0, 1] (1 = identical), plus the
// 1-m dissimilarity and best-reference risk built on them. Tokens compare by
// exact id. Two empty sequences count as identical (metric 1) for every
// kind, so dissimilarity(a, a) is always 0.

#include <span>
#include <vector>

namespace earlyexit {

enum class MetricKind { token_f1, rouge_l, norm_edit_similarity };

using TokenSeq = std::vector<int>;

// Bag-of-tokens F1; exactly one empty side scores 0.
double token_f1(std::span<const int> candidate, std::span<const int> reference);

// LCS F-measure: P = LCS/|cand|, R = LCS/|ref|; 0 when the LCS is empty.
double rouge_l(std::span<const int> candidate, std::span<const int> reference);

// 1 - Levenshtein(cand, ref) / max(|cand|, |ref|).
double norm_edit_similarity(std::span<const int> candidate, std::span<const int> reference);

double similarity(MetricKind kind, std::span<const int> a, std::span<const int> b);

inline double dissimilarity(MetricKind kind, std::span<const int> a, std::span<const int> b) {
    return 1.0 - similarity(kind, a, b);
}

// 1 - max over references of metric(a, z); the best-matching reference sets
// the risk. Requires a non-empty reference set.
double risk(MetricKind kind, std::span<const int> a,
            const std::vector<TokenSeq>& reference_set);

}  // namespace earlyexit
