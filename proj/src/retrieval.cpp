#include "octloc/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace octloc {

void DescriptorDatabase::add(DbEntry entry) {
  if (entries_.empty()) {
    if (entry.descriptor.empty())
      throw DataError("database entry with empty descriptor");
    dim_ = entry.descriptor.size();
  } else if (entry.descriptor.size() != dim_) {
    throw ShapeError("descriptor dimension mismatch: " + entry.id);
  }
  for (const auto& e : entries_)
    if (e.id == entry.id) throw DataError("duplicate database id: " + entry.id);
  double sq = 0.0;
  for (double v : entry.descriptor) sq += v * v;
  if (std::fabs(std::sqrt(sq) - 1.0) > 1e-6)
    throw DataError("descriptor not unit norm: " + entry.id);
  entries_.push_back(std::move(entry));
}

std::vector<std::size_t> query_topn(const DescriptorDatabase& db,
                                    const std::vector<double>& q,
                                    std::size_t n) {
  if (db.size() == 0) throw DataError("query against empty database");
  if (q.size() != db.dim())
    throw ShapeError("query dimension does not match database");
  std::vector<std::pair<double, std::size_t>> scored(db.size());
  for (std::size_t i = 0; i < db.size(); ++i) {
    const auto& d = db.entry(i).descriptor;
    double sq = 0.0;
    for (std::size_t c = 0; c < q.size(); ++c) {
      const double diff = d[c] - q[c];
      sq += diff * diff;
    }
    scored[i] = {sq, i};
  }
  std::sort(scored.begin(), scored.end(),
            [&db](const auto& a, const auto& b) {
              if (a.first != b.first) return a.first < b.first;
              return db.entry(a.second).id < db.entry(b.second).id;
            });
  const std::size_t take = std::min(n, scored.size());
  std::vector<std::size_t> out(take);
  for (std::size_t i = 0; i < take; ++i) out[i] = scored[i].second;
  return out;
}

namespace {

bool within(const Pose& a, const Pose& b, double radius) {
  return pose_horizontal_distance(a, b) <= radius;
}

bool has_any_positive(const RecallInput& in, std::size_t qi) {
  for (const auto& dp : in.db_poses)
    if (within(in.query_poses[qi], dp, in.radius)) return true;
  return false;
}

}  // namespace

std::size_t excluded_queries(const RecallInput& in) {
  std::size_t n = 0;
  for (std::size_t qi = 0; qi < in.query_poses.size(); ++qi)
    if (!has_any_positive(in, qi)) ++n;
  return n;
}

double recall_at_n(const RecallInput& in, std::size_t n) {
  if (in.rankings.size() != in.query_poses.size())
    throw ShapeError("recall_at_n: one ranking per query required");
  std::size_t hits = 0, eligible = 0;
  for (std::size_t qi = 0; qi < in.query_poses.size(); ++qi) {
    if (!has_any_positive(in, qi)) continue;
    ++eligible;
    const auto& rank = in.rankings[qi];
    const std::size_t top = std::min(n, rank.size());
    for (std::size_t r = 0; r < top; ++r) {
      if (within(in.query_poses[qi], in.db_poses[rank[r]], in.radius)) {
        ++hits;
        break;
      }
    }
  }
  if (eligible == 0) return 0.0;
  return static_cast<double>(hits) / static_cast<double>(eligible);
}

double mrr(const RecallInput& in) {
  if (in.rankings.size() != in.query_poses.size())
    throw ShapeError("mrr: one ranking per query required");
  double sum = 0.0;
  std::size_t eligible = 0;
  for (std::size_t qi = 0; qi < in.query_poses.size(); ++qi) {
    if (!has_any_positive(in, qi)) continue;
    ++eligible;
    const auto& rank = in.rankings[qi];
    for (std::size_t r = 0; r < rank.size(); ++r) {
      if (within(in.query_poses[qi], in.db_poses[rank[r]], in.radius)) {
        sum += 1.0 / static_cast<double>(r + 1);
        break;
      }
    }
  }
  if (eligible == 0) return 0.0;
  return sum / static_cast<double>(eligible);
}

std::string EvalReport::to_json() const {
  std::ostringstream os;
  os.precision(12);
  os << "{\n  \"ar1\": " << ar1 << ",\n  \"ar1p\": " << ar1p
     << ",\n  \"ar_curve\": [";
  for (std::size_t i = 0; i < ar_curve.size(); ++i)
    os << (i ? ", " : "") << ar_curve[i];
  os << "],\n  \"mrr\": " << mrr << ",\n  \"excluded\": " << excluded
     << ",\n  \"queries\": " << queries << "\n}\n";
  return os.str();
}

EvalReport evaluate(const DescriptorDatabase& db,
                    const std::vector<DbEntry>& queries, double radius) {
  RecallInput in;
  in.radius = radius;
  in.rankings.reserve(queries.size());
  in.query_poses.reserve(queries.size());
  for (const auto& q : queries) {
    in.rankings.push_back(query_topn(db, q.descriptor, db.size()));
    in.query_poses.push_back(q.pose);
  }
  for (std::size_t i = 0; i < db.size(); ++i)
    in.db_poses.push_back(db.entry(i).pose);

  EvalReport rep;
  rep.queries = queries.size();
  rep.excluded = excluded_queries(in);
  rep.ar1 = recall_at_n(in, 1);
  const std::size_t one_percent =
      (db.size() + 99) / 100;  // ceil(size / 100), at least 1
  rep.ar1p = recall_at_n(in, one_percent);
  const std::size_t curve_max = std::min<std::size_t>(25, db.size());
  for (std::size_t n = 1; n <= curve_max; ++n)
    rep.ar_curve.push_back(recall_at_n(in, n));
  rep.mrr = mrr(in);
  return rep;
}

}  // namespace octloc
