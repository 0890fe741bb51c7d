#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <vector>

#include "fedsurv/rng.hpp"
#include "fedsurv/survcore/types.hpp"

namespace fedsurv {

/// Per-site partition of row indices into M validation folds.
struct FoldAssignment {
  std::size_t M = 0;
  std::vector<std::vector<std::vector<std::size_t>>> site_folds;  // [site][fold] -> global row ids (sorted)
  std::vector<int> fold_of_row;                                   // -1 for rows never assigned

  std::size_t num_sites() const { return site_folds.size(); }

  /// Rows of `site` outside validation fold `fold` (sorted).
  std::vector<std::size_t> training_rows(int site, std::size_t fold) const {
    std::vector<std::size_t> out;
    const auto& folds = site_folds[static_cast<std::size_t>(site)];
    for (std::size_t m = 0; m < folds.size(); ++m)
      if (m != fold) out.insert(out.end(), folds[m].begin(), folds[m].end());
    std::sort(out.begin(), out.end());
    return out;
  }

  /// Union over sites of the training rows for fold `fold` (the pooled training set).
  std::vector<std::size_t> pooled_training_rows(std::size_t fold) const {
    std::vector<std::size_t> out;
    for (std::size_t s = 0; s < site_folds.size(); ++s) {
      auto r = training_rows(static_cast<int>(s), fold);
      out.insert(out.end(), r.begin(), r.end());
    }
    std::sort(out.begin(), out.end());
    return out;
  }
};

/// Shuffle each site's rows with its own stream and deal them round-robin into M folds.
/// Sites without rows get empty folds; the size bound only applies to sites that have rows.
inline FoldAssignment make_folds(const Dataset& data, std::size_t M, std::uint64_t seed) {
  const int K = num_sites(data);
  auto by_site = rows_by_site(data, K);
  std::size_t min_n = SIZE_MAX;
  for (const auto& rows : by_site)
    if (!rows.empty()) min_n = std::min(min_n, rows.size());
  require(!data.empty(), ErrorKind::InvalidFoldCount, "no observations to split");
  if (M < 2 || M > min_n / 2)
    fail(ErrorKind::InvalidFoldCount, "fold count " + std::to_string(M) + " outside [2, " + std::to_string(min_n / 2) +
                                          "] for the smallest site of " + std::to_string(min_n) + " rows");

  FoldAssignment out;
  out.M = M;
  out.site_folds.assign(static_cast<std::size_t>(K), std::vector<std::vector<std::size_t>>(M));
  out.fold_of_row.assign(data.size(), -1);
  for (int k = 0; k < K; ++k) {
    auto rows = by_site[static_cast<std::size_t>(k)];
    auto eng = make_engine(seed, "folds", {static_cast<std::uint64_t>(k)});
    // Fisher-Yates with an explicit uniform draw keeps the permutation library-independent.
    for (std::size_t i = rows.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(eng() % i);
      std::swap(rows[i - 1], rows[j]);
    }
    for (std::size_t i = 0; i < rows.size(); ++i) {
      out.site_folds[static_cast<std::size_t>(k)][i % M].push_back(rows[i]);
      out.fold_of_row[rows[i]] = static_cast<int>(i % M);
    }
    for (auto& f : out.site_folds[static_cast<std::size_t>(k)]) std::sort(f.begin(), f.end());
  }
  return out;
}

}  // namespace fedsurv
