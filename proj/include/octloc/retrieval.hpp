#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "octloc/geometry.hpp"

namespace octloc {

struct DbEntry {
  std::string id;
  Pose pose;
  std::vector<double> descriptor;  // unit norm
};

// Immutable once built; ids unique, descriptors all the same dimension.
class DescriptorDatabase {
 public:
  void add(DbEntry entry);  // validates dimension, uniqueness, unit norm
  std::size_t size() const { return entries_.size(); }
  std::size_t dim() const { return dim_; }
  const DbEntry& entry(std::size_t i) const { return entries_[i]; }

 private:
  std::vector<DbEntry> entries_;
  std::size_t dim_ = 0;
};

// Indices into the database sorted by ascending L2 distance to the query,
// ties broken by ascending id. n is clamped to the database size.
std::vector<std::size_t> query_topn(const DescriptorDatabase& db,
                                    const std::vector<double>& q,
                                    std::size_t n);

// A query scores at N if any of its top-N retrievals lies within radius
// (horizontal) of its pose. Queries with no true positive anywhere in the
// database are excluded from the denominator.
struct RecallInput {
  std::vector<std::vector<std::size_t>> rankings;  // per query, db indices
  std::vector<Pose> query_poses;
  std::vector<Pose> db_poses;
  double radius = 30.0;
};

double recall_at_n(const RecallInput& in, std::size_t n);
std::size_t excluded_queries(const RecallInput& in);

// Mean reciprocal rank of the first true positive per query; excluded
// queries are skipped just like in recall_at_n.
double mrr(const RecallInput& in);

struct EvalReport {
  double ar1 = 0.0;
  double ar1p = 0.0;  // AR@1%, N = ceil(db size / 100)
  std::vector<double> ar_curve;  // AR@N for N = 1 .. min(25, db size)
  double mrr = 0.0;
  std::size_t excluded = 0;
  std::size_t queries = 0;
  std::string to_json() const;
};

EvalReport evaluate(const DescriptorDatabase& db,
                    const std::vector<DbEntry>& queries, double radius);

}  // namespace octloc
