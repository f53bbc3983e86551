#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "octloc/common.hpp"
#include "octloc/retrieval.hpp"

using namespace octloc;

namespace {

std::vector<double> unit(std::vector<double> v) {
  double n = 0.0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  for (double& x : v) x /= n;
  return v;
}

std::vector<double> basis(std::size_t dim, std::size_t i) {
  std::vector<double> v(dim, 0.0);
  v[i] = 1.0;
  return v;
}

DbEntry entry(std::string id, std::vector<double> desc, double x = 0.0,
              double y = 0.0) {
  DbEntry e;
  e.id = std::move(id);
  e.descriptor = std::move(desc);
  e.pose.t = {x, y, 0.0};
  return e;
}

std::vector<double> random_unit(std::size_t dim, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> v(dim);
  for (double& x : v) x = g(rng);
  return unit(std::move(v));
}

Pose at(double x, double y) {
  Pose p;
  p.t = {x, y, 0.0};
  return p;
}

}  // namespace

TEST_CASE("database add validation") {
  DescriptorDatabase db;
  CHECK_THROWS_AS(db.add(entry("a", {})), DataError);
  db.add(entry("a", basis(4, 0)));
  CHECK(db.dim() == 4);
  CHECK_THROWS_AS(db.add(entry("b", basis(5, 0))), ShapeError);
  CHECK_THROWS_AS(db.add(entry("a", basis(4, 1))), DataError);  // dup id
  CHECK_THROWS_AS(db.add(entry("c", {0.5, 0.5, 0.5, 0.0})), DataError);

  // Norm off by less than the 1e-6 tolerance still passes.
  std::vector<double> nearly = basis(4, 2);
  nearly[2] = 1.0 + 5e-7;
  CHECK_NOTHROW(db.add(entry("d", nearly)));
  CHECK(db.size() == 2);
}

TEST_CASE("query_topn: exact match ranks first at distance zero") {
  DescriptorDatabase db;
  for (std::size_t i = 0; i < 6; ++i)
    db.add(entry("e" + std::to_string(i), basis(8, i)));
  auto top = query_topn(db, basis(8, 3), 3);
  REQUIRE(top.size() == 3);
  CHECK(top[0] == 3);
  CHECK(db.entry(top[0]).id == "e3");
}

TEST_CASE("query_topn: n larger than the database clamps") {
  DescriptorDatabase db;
  for (std::size_t i = 0; i < 4; ++i)
    db.add(entry("e" + std::to_string(i), basis(4, i)));
  auto top = query_topn(db, basis(4, 0), 100);
  CHECK(top.size() == 4);
  std::vector<std::size_t> sorted = top;
  std::sort(sorted.begin(), sorted.end());
  CHECK(sorted == std::vector<std::size_t>{0, 1, 2, 3});
}

TEST_CASE("query_topn: ties broken by ascending id") {
  DescriptorDatabase db;
  db.add(entry("zeta", basis(4, 0)));
  db.add(entry("alpha", basis(4, 0)));  // identical descriptor
  db.add(entry("mid", basis(4, 1)));
  auto top = query_topn(db, basis(4, 0), 3);
  REQUIRE(top.size() == 3);
  CHECK(db.entry(top[0]).id == "alpha");
  CHECK(db.entry(top[1]).id == "zeta");
  CHECK(db.entry(top[2]).id == "mid");
}

TEST_CASE("query_topn errors") {
  DescriptorDatabase db;
  CHECK_THROWS_AS(query_topn(db, {1.0}, 1), DataError);
  db.add(entry("a", basis(4, 0)));
  CHECK_THROWS_AS(query_topn(db, {1.0, 0.0}, 1), ShapeError);
}

TEST_CASE("query_topn matches an argsort oracle on 100 descriptors") {
  std::mt19937_64 rng(404);
  DescriptorDatabase db;
  std::vector<std::vector<double>> descs;
  for (int i = 0; i < 100; ++i) {
    descs.push_back(random_unit(8, rng));
    db.add(entry("e" + std::to_string(i), descs.back()));
  }
  for (int trial = 0; trial < 5; ++trial) {
    const std::vector<double> q = random_unit(8, rng);
    std::vector<std::pair<double, std::string>> oracle(100);
    for (std::size_t i = 0; i < 100; ++i) {
      double sq = 0.0;
      for (std::size_t c = 0; c < 8; ++c) {
        const double d = descs[i][c] - q[c];
        sq += d * d;
      }
      oracle[i] = {sq, db.entry(i).id};
    }
    std::sort(oracle.begin(), oracle.end());
    auto top = query_topn(db, q, 100);
    REQUIRE(top.size() == 100);
    for (std::size_t r = 0; r < 100; ++r)
      CHECK(db.entry(top[r]).id == oracle[r].second);
  }
}

TEST_CASE("rankings survive a signed permutation of the coordinates") {
  // A signed permutation is orthogonal and exact in floating point, so the
  // pairwise distances, and with them the ranking, cannot move at all.
  std::mt19937_64 rng(811);
  const std::size_t dim = 6;
  std::vector<std::size_t> perm(dim);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<double> sign(dim);
  for (double& s : sign) s = (rng() & 1) ? 1.0 : -1.0;
  auto apply = [&](const std::vector<double>& v) {
    std::vector<double> out(dim);
    for (std::size_t i = 0; i < dim; ++i) out[perm[i]] = sign[i] * v[i];
    return out;
  };

  DescriptorDatabase plain, mapped;
  for (int i = 0; i < 40; ++i) {
    const std::vector<double> d = random_unit(dim, rng);
    plain.add(entry("e" + std::to_string(i), d));
    mapped.add(entry("e" + std::to_string(i), apply(d)));
  }
  for (int trial = 0; trial < 4; ++trial) {
    const std::vector<double> q = random_unit(dim, rng);
    CHECK(query_topn(plain, q, 40) == query_topn(mapped, apply(q), 40));
  }
}

TEST_CASE("recall_at_n: perfect retrieval") {
  RecallInput in;
  in.radius = 30.0;
  for (std::size_t i = 0; i < 5; ++i) {
    in.db_poses.push_back(at(100.0 * i, 0.0));
    in.query_poses.push_back(at(100.0 * i, 1.0));
    in.rankings.push_back({i, (i + 1) % 5});
  }
  CHECK(recall_at_n(in, 1) == 1.0);
  CHECK(excluded_queries(in) == 0);
  CHECK(mrr(in) == 1.0);
}

TEST_CASE("recall_at_n: miss at 1, hit at 2") {
  RecallInput in;
  in.radius = 30.0;
  in.db_poses = {at(0, 0), at(500, 0)};
  in.query_poses = {at(1, 0)};
  in.rankings = {{1, 0}};  // wrong entry first
  CHECK(recall_at_n(in, 1) == 0.0);
  CHECK(recall_at_n(in, 2) == 1.0);
  CHECK(mrr(in) == 0.5);
}

TEST_CASE("queries with no possible positive are excluded") {
  RecallInput in;
  in.radius = 30.0;
  in.db_poses = {at(0, 0), at(100, 0)};
  in.query_poses = {at(1, 0), at(5000, 5000)};  // second is hopeless
  in.rankings = {{0, 1}, {0, 1}};
  CHECK(excluded_queries(in) == 1);
  // The hopeless query does not drag the denominator down.
  CHECK(recall_at_n(in, 1) == 1.0);
  CHECK(mrr(in) == 1.0);
}

TEST_CASE("recall boundary: exactly at the radius counts as a positive") {
  RecallInput in;
  in.radius = 30.0;
  in.db_poses = {at(30, 0)};
  in.query_poses = {at(0, 0)};
  in.rankings = {{0}};
  CHECK(excluded_queries(in) == 0);
  CHECK(recall_at_n(in, 1) == 1.0);
}

TEST_CASE("mrr pinned: ranks 1, 2 and 4") {
  RecallInput in;
  in.radius = 10.0;
  // One distinct cluster per query, far apart; db index i sits at cluster i.
  for (int i = 0; i < 4; ++i) in.db_poses.push_back(at(1000.0 * i, 0.0));
  in.query_poses = {at(0, 1), at(1000, 1), at(2000, 1)};
  in.rankings = {
      {0, 1, 2, 3},  // hit at rank 1
      {0, 1, 2, 3},  // hit at rank 2
      {0, 1, 3, 2},  // hit at rank 4
  };
  CHECK(mrr(in) == doctest::Approx((1.0 + 0.5 + 0.25) / 3.0).epsilon(1e-9));
  CHECK(mrr(in) == doctest::Approx(0.5833333333).epsilon(1e-9));
}

TEST_CASE("recall and mrr match a brute-force oracle on random inputs") {
  std::mt19937_64 rng(99);
  std::uniform_real_distribution<double> u(0.0, 300.0);
  RecallInput in;
  in.radius = 30.0;
  const std::size_t dbn = 30, qn = 50;
  for (std::size_t i = 0; i < dbn; ++i) in.db_poses.push_back(at(u(rng), u(rng)));
  for (std::size_t i = 0; i < qn; ++i) {
    in.query_poses.push_back(at(u(rng), u(rng)));
    std::vector<std::size_t> rank(dbn);
    std::iota(rank.begin(), rank.end(), 0);
    std::shuffle(rank.begin(), rank.end(), rng);
    in.rankings.push_back(rank);
  }

  auto dist = [&](std::size_t qi, std::size_t di) {
    return std::hypot(in.query_poses[qi].t[0] - in.db_poses[di].t[0],
                      in.query_poses[qi].t[1] - in.db_poses[di].t[1]);
  };
  std::size_t excl = 0;
  std::vector<std::size_t> first_hit(qn, 0);  // 1-based, 0 = none
  std::vector<bool> eligible(qn, false);
  for (std::size_t qi = 0; qi < qn; ++qi) {
    for (std::size_t di = 0; di < dbn; ++di)
      if (dist(qi, di) <= in.radius) eligible[qi] = true;
    if (!eligible[qi]) {
      ++excl;
      continue;
    }
    for (std::size_t r = 0; r < dbn; ++r) {
      if (dist(qi, in.rankings[qi][r]) <= in.radius) {
        first_hit[qi] = r + 1;
        break;
      }
    }
  }
  CHECK(excluded_queries(in) == excl);
  const double denom = static_cast<double>(qn - excl);
  for (std::size_t n = 1; n <= 10; ++n) {
    std::size_t hits = 0;
    for (std::size_t qi = 0; qi < qn; ++qi)
      if (eligible[qi] && first_hit[qi] >= 1 && first_hit[qi] <= n) ++hits;
    CHECK(recall_at_n(in, n) ==
          doctest::Approx(hits / denom).epsilon(1e-12));
  }
  double rr = 0.0;
  for (std::size_t qi = 0; qi < qn; ++qi)
    if (eligible[qi] && first_hit[qi]) rr += 1.0 / first_hit[qi];
  CHECK(mrr(in) == doctest::Approx(rr / denom).epsilon(1e-12));
}

TEST_CASE("ar curve is monotone non-decreasing") {
  std::mt19937_64 rng(123);
  std::uniform_real_distribution<double> u(0.0, 200.0);
  RecallInput in;
  in.radius = 25.0;
  for (int i = 0; i < 20; ++i) in.db_poses.push_back(at(u(rng), u(rng)));
  for (int i = 0; i < 20; ++i) {
    in.query_poses.push_back(at(u(rng), u(rng)));
    std::vector<std::size_t> rank(20);
    std::iota(rank.begin(), rank.end(), 0);
    std::shuffle(rank.begin(), rank.end(), rng);
    in.rankings.push_back(rank);
  }
  double prev = 0.0;
  for (std::size_t n = 1; n <= 20; ++n) {
    const double r = recall_at_n(in, n);
    CHECK(r >= prev);
    prev = r;
  }
  CHECK(recall_at_n(in, 20) == recall_at_n(in, 500));  // saturates
}

TEST_CASE("shape errors when rankings and queries disagree") {
  RecallInput in;
  in.db_poses = {at(0, 0)};
  in.query_poses = {at(0, 0), at(1, 0)};
  in.rankings = {{0}};
  CHECK_THROWS_AS(recall_at_n(in, 1), ShapeError);
  CHECK_THROWS_AS(mrr(in), ShapeError);
}

TEST_CASE("evaluate: end-to-end report on a clean separable set") {
  DescriptorDatabase db;
  std::vector<DbEntry> queries;
  for (std::size_t i = 0; i < 6; ++i) {
    db.add(entry("loc" + std::to_string(i), basis(8, i), 100.0 * i, 0.0));
    DbEntry q = entry("q" + std::to_string(i), basis(8, i), 100.0 * i, 2.0);
    queries.push_back(q);
  }
  // One query far from every database pose: reported, not scored.
  queries.push_back(entry("stray", basis(8, 0), 9000.0, 9000.0));

  EvalReport rep = evaluate(db, queries, 30.0);
  CHECK(rep.queries == 7);
  CHECK(rep.excluded == 1);
  CHECK(rep.ar1 == 1.0);
  CHECK(rep.ar1p == rep.ar1);  // ceil(6/100) = 1
  CHECK(rep.mrr == 1.0);
  REQUIRE(rep.ar_curve.size() == 6);  // min(25, db size)
  for (double v : rep.ar_curve) CHECK(v == 1.0);

  const nlohmann::json j = nlohmann::json::parse(rep.to_json());
  CHECK(j["ar1"].get<double>() == 1.0);
  CHECK(j["excluded"].get<std::size_t>() == 1);
  CHECK(j["queries"].get<std::size_t>() == 7);
  CHECK(j["ar_curve"].size() == 6);
  CHECK(j["mrr"].get<double>() == 1.0);
}

TEST_CASE("evaluate: confusable descriptors lower ar1 but not ar2") {
  DescriptorDatabase db;
  db.add(entry("a", basis(4, 0), 0.0, 0.0));
  db.add(entry("b", basis(4, 1), 400.0, 0.0));

  // The query sits at "a" but its descriptor leans toward "b".
  std::vector<DbEntry> queries = {
      entry("q", unit({0.4, 0.9, 0.0, 0.0}), 1.0, 0.0)};
  EvalReport rep = evaluate(db, queries, 30.0);
  CHECK(rep.ar1 == 0.0);
  REQUIRE(rep.ar_curve.size() == 2);
  CHECK(rep.ar_curve[1] == 1.0);
  CHECK(rep.mrr == 0.5);
}
