#include <cmath>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "crowdsense/simulator.hpp"
#include "support.hpp"

namespace {

using namespace crowdsense;
using namespace crowdsense::sim;
using namespace std::chrono_literals;

struct Moments {
    double mean_x = 0, mean_y = 0, sd = 0;
};

// Offset of the sample mean from the origin and the pooled per-axis std-dev, in meters.
Moments moments(const std::vector<geo::LocalFrame::Xy>& xy)
{
    Moments m;
    const double n = static_cast<double>(xy.size());
    for (const auto& p : xy) {
        m.mean_x += p.x / n;
        m.mean_y += p.y / n;
    }
    double ss = 0;
    for (const auto& p : xy) {
        ss += (p.x - m.mean_x) * (p.x - m.mean_x) + (p.y - m.mean_y) * (p.y - m.mean_y);
    }
    m.sd = std::sqrt(ss / (2.0 * (n - 1.0)));
    return m;
}

TEST(Rng, SplitMixReferenceStream)
{
    SplitMix64 sm(0);
    EXPECT_EQ(sm.next(), 0xe220a8397b1dcdafULL);
    EXPECT_EQ(sm.next(), 0x6e789e6aa1b965f4ULL);
    EXPECT_EQ(sm.next(), 0x06c45d188009454fULL);
}

TEST(Rng, XoshiroReferenceStream)
{
    Rng rng(42);
    EXPECT_EQ(rng.next(), 0x15780b2e0c2ec716ULL);
    EXPECT_EQ(rng.next(), 0x6104d9866d113a7eULL);
    EXPECT_EQ(rng.next(), 0xae17533239e499a1ULL);
    EXPECT_EQ(rng.next(), 0xecb8ad4703b360a1ULL);
    Rng u(42);
    EXPECT_EQ(u.uniform01(), 0.08386297105988216);
    EXPECT_EQ(u.uniform01(), 0.3789802506626686);
}

TEST(Rng, NormalMoments)
{
    Rng rng(1);
    double s = 0, ss = 0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
        const double v = rng.normal();
        s += v;
        ss += v * v;
    }
    EXPECT_NEAR(s / n, 0.0, 0.01);
    EXPECT_NEAR(ss / n, 1.0, 0.01);
}

TEST(Uniform, ZeroPoints)
{
    Rng rng(1);
    EXPECT_TRUE(generate_uniform_in_polygon(0, geo::default_campus(), rng).empty());
}

TEST(Uniform, NineThousandAllInside)
{
    const auto campus = geo::default_campus();
    Rng rng(42);
    const auto pts = generate_uniform_in_polygon(9000, campus, rng);
    ASSERT_EQ(pts.size(), 9000u);
    for (const auto& p : pts) {
        ASSERT_TRUE(geo::point_in_polygon(campus, p));
        EXPECT_EQ(geo::quantize(p), p);
    }
}

TEST(Uniform, SameSeedSamePoints)
{
    const auto campus = geo::default_campus();
    Rng a(9), b(9), c(10);
    const auto pa = generate_uniform_in_polygon(500, campus, a);
    EXPECT_EQ(pa, generate_uniform_in_polygon(500, campus, b));
    EXPECT_NE(pa, generate_uniform_in_polygon(500, campus, c));
}

TEST(Uniform, FillsTheNotchedPolygonEvenly)
{
    // Two equal-area halves of the main rectangle should get similar counts.
    const auto campus = geo::default_campus();
    Rng rng(4);
    const auto pts = generate_uniform_in_polygon(20000, campus, rng);
    int west = 0, east = 0;
    for (const auto& p : pts) {
        if (p.lat > -15.8120) {
            continue; // skip the strip that holds the notch
        }
        (p.lon < -70.0205 ? west : east)++;
    }
    EXPECT_NEAR(static_cast<double>(west) / (west + east), 0.5, 0.02);
}

TEST(Hotspot, EmptyWhenCountIsZero)
{
    const auto campus = geo::default_campus();
    Rng rng(1);
    Hotspot h;
    h.center = {-15.84, -70.02};
    EXPECT_TRUE(sample_hotspot(h, geo::frame_for(campus), campus, rng).empty());
}

TEST(Hotspot, MomentsMatchAnIndependentSampler)
{
    const auto campus = geo::default_campus();
    const auto frame = geo::frame_for(campus);
    Hotspot h;
    h.center = {-15.84, -70.02};
    h.sigma_m = 20.0;
    h.count = 200;
    const auto c = frame.project(h.center);
    double ours_ms = 0, ref_ms = 0;
    for (std::uint64_t seed = 1; seed <= 50; ++seed) {
        Rng rng(seed);
        std::vector<geo::LocalFrame::Xy> ours;
        for (const auto& p : sample_hotspot(h, frame, campus, rng)) {
            const auto xy = frame.project(p);
            ours.push_back({xy.x - c.x, xy.y - c.y});
        }
        std::mt19937_64 gen(seed);
        std::normal_distribution<double> normal(0.0, 20.0);
        std::vector<geo::LocalFrame::Xy> ref;
        for (int i = 0; i < 200; ++i) {
            ref.push_back({normal(gen), normal(gen)});
        }
        const auto mo = moments(ours);
        const auto mr = moments(ref);
        EXPECT_LT(std::hypot(mo.mean_x, mo.mean_y), 5.0) << "seed " << seed;
        EXPECT_NEAR(mo.sd, 20.0, 5.0) << "seed " << seed;
        EXPECT_LT(std::hypot(mr.mean_x, mr.mean_y), 5.0) << "seed " << seed;
        EXPECT_NEAR(mr.sd, 20.0, 5.0) << "seed " << seed;
        ours_ms += mo.sd * mo.sd / 50.0;
        ref_ms += mr.sd * mr.sd / 50.0;
    }
    EXPECT_NEAR(std::sqrt(ours_ms), std::sqrt(ref_ms), 0.5);
}

TEST(Hotspot, NearTheBoundaryStaysInside)
{
    const auto campus = geo::default_campus();
    Hotspot h;
    h.center = {-15.8850 + 1.0 / geo::kMetersPerDegLat, -70.02};
    h.sigma_m = 0.5;
    h.count = 200;
    Rng rng(3);
    const auto pts = sample_hotspot(h, geo::frame_for(campus), campus, rng);
    ASSERT_EQ(pts.size(), 200u);
    for (const auto& p : pts) {
        EXPECT_TRUE(geo::point_in_polygon(campus, p));
    }
}

TEST(Hotspot, OutsideTheCampusIsAScenarioError)
{
    const auto campus = geo::default_campus();
    Hotspot h;
    h.center = {-15.70, -70.02};
    h.count = 1;
    Rng rng(1);
    EXPECT_THROW(sample_hotspot(h, geo::frame_for(campus), campus, rng), ScenarioError);
    ScenarioConfig cfg;
    cfg.hotspots.push_back(h);
    EXPECT_THROW(cfg.validate(), ScenarioError);
}

TEST(RandomWalk, ZeroSigmaStaysPut)
{
    const auto campus = geo::default_campus();
    Rng rng(1);
    const geo::GeoPoint p{-15.84, -70.02};
    EXPECT_EQ(step_random_walk(p, 0.0, campus, geo::frame_for(campus), rng), p);
}

TEST(RandomWalk, NeverLeavesTheCampus)
{
    const auto campus = geo::default_campus();
    const auto frame = geo::frame_for(campus);
    Rng rng(2);
    geo::GeoPoint p{-15.8850 + 2.0 / geo::kMetersPerDegLat, -70.0720 + 2.0 / frame.meters_per_deg_lon()};
    for (int i = 0; i < 10000; ++i) {
        p = step_random_walk(p, 50.0, campus, frame, rng);
        ASSERT_TRUE(geo::point_in_polygon(campus, p)) << "step " << i;
    }
}

TEST(RandomWalk, StepsAreCentredGaussians)
{
    const auto campus = geo::default_campus();
    const auto frame = geo::frame_for(campus);
    const geo::GeoPoint p{-15.84, -70.02};
    const auto c = frame.project(p);
    Rng rng(6);
    std::vector<geo::LocalFrame::Xy> steps;
    const int n = 10000;
    for (int i = 0; i < n; ++i) {
        const auto xy = frame.project(step_random_walk(p, 5.0, campus, frame, rng));
        steps.push_back({xy.x - c.x, xy.y - c.y});
    }
    const auto m = moments(steps);
    // Four standard errors of the mean; quantization adds under 1 cm.
    EXPECT_LT(std::abs(m.mean_x), 4.0 * 5.0 / std::sqrt(n));
    EXPECT_LT(std::abs(m.mean_y), 4.0 * 5.0 / std::sqrt(n));
    EXPECT_NEAR(m.sd, 5.0, 0.15);
}

TEST(Scenario, TenPeopleOneTick)
{
    ScenarioConfig cfg;
    cfg.population = 10;
    const auto ds = run_scenario(cfg);
    ASSERT_EQ(ds.size(), 10u);
    for (std::size_t i = 0; i < ds.size(); ++i) {
        EXPECT_EQ(ds.reports[i].ts, default_epoch());
        EXPECT_EQ(ds.reports[i].id, person_id(i));
    }
    EXPECT_EQ(person_id(0), "p000000");
    EXPECT_EQ(person_id(9599), "p009599");
}

TEST(Scenario, FullPopulationSnapshotIsTheUniformDraw)
{
    ScenarioConfig cfg;
    cfg.seed = 42;
    cfg.population = 9000;
    const auto ds = run_scenario(cfg);
    Rng rng(42);
    const auto pts = generate_uniform_in_polygon(9000, cfg.campus, rng);
    ASSERT_EQ(ds.size(), pts.size());
    for (std::size_t i = 0; i < pts.size(); ++i) {
        EXPECT_EQ(ds.reports[i].pos, pts[i]);
    }
}

TEST(Scenario, ReportCountAndContainment)
{
    ScenarioConfig cfg;
    cfg.population = 300;
    cfg.duration = 600s;
    cfg.tick = 60s;
    cfg.walk_step_sigma = 40.0;
    Hotspot h;
    h.center = {-15.84, -70.02};
    h.count = 50;
    cfg.hotspots.push_back(h);
    const auto ds = run_scenario(cfg);
    EXPECT_EQ(ds.size(), 300u * 11u);
    for (const auto& r : ds.reports) {
        ASSERT_TRUE(geo::point_in_polygon(cfg.campus, r.pos));
    }
    EXPECT_EQ(ds.reports.back().ts, default_epoch() + 600s);
    EXPECT_TRUE(std::is_sorted(ds.reports.begin(), ds.reports.end(),
                               [](const auto& a, const auto& b) { return a.ts < b.ts; }));
}

TEST(Scenario, ByteIdenticalAcrossRuns)
{
    auto s = testing_support::crowd_scenario(5);
    s.cfg.duration = 120s;
    std::stringstream a, b;
    model::write_dataset(run_scenario(s.cfg), a, model::Format::Ndjson);
    model::write_dataset(run_scenario(s.cfg), b, model::Format::Ndjson);
    EXPECT_EQ(a.str(), b.str());
    s.cfg.seed = 6;
    std::stringstream c;
    model::write_dataset(run_scenario(s.cfg), c, model::Format::Ndjson);
    EXPECT_NE(a.str(), c.str());
}

TEST(Scenario, HotspotMembersConcentrate)
{
    const auto s = testing_support::crowd_scenario(7);
    const auto ds = run_scenario(s.cfg);
    ASSERT_EQ(ds.size(), 9600u);
    // Hotspot k re-anchors people [9600 - 200(k+1), 9600 - 200k).
    for (std::size_t k = 0; k < 3; ++k) {
        std::size_t near = 0;
        for (std::size_t i = 9600 - 200 * (k + 1); i < 9600 - 200 * k; ++i) {
            near += geo::haversine_distance(ds.reports[i].pos, s.centers[k]) <= 60.0;
        }
        EXPECT_GE(near, 190u) << "hotspot " << k;
    }
}

TEST(Scenario, HotspotWindowsGateAnchoring)
{
    auto s = testing_support::crowd_scenario(8, 1, 200, 1000);
    s.cfg.duration = 120s;
    s.cfg.hotspots[0].start = s.cfg.epoch + 60s;
    s.cfg.hotspots[0].end = s.cfg.epoch + 60s;
    const auto ds = run_scenario(s.cfg);
    ASSERT_EQ(ds.size(), 3u * 1200u);
    std::size_t near[3] = {0, 0, 0};
    for (std::size_t k = 0; k < 3; ++k) {
        for (std::size_t i = 1000; i < 1200; ++i) {
            near[k] += geo::haversine_distance(ds.reports[k * 1200 + i].pos, s.centers[0]) <= 60.0;
        }
    }
    EXPECT_LT(near[0], 5u);
    EXPECT_GE(near[1], 190u);
    EXPECT_GE(near[2], 150u); // one 5 m walk step after release
}

TEST(Scenario, ValidationErrors)
{
    ScenarioConfig cfg;
    cfg.population = 10;
    Hotspot h;
    h.center = {-15.84, -70.02};
    h.count = 11;
    cfg.hotspots.push_back(h);
    EXPECT_THROW(cfg.validate(), ScenarioError);
    cfg.hotspots.clear();
    cfg.duration = -1s;
    EXPECT_THROW(cfg.validate(), ArgumentError);
    cfg.duration = 0s;
    cfg.tick = 0s;
    EXPECT_THROW(cfg.validate(), ArgumentError);
}

TEST(ScenarioConfig, ParsesGrammar)
{
    const auto cfg = parse_scenario(R"(# crowd
seed = 7
population = 9600   # people
duration = 300
tick = 30
walk_step_sigma = 2.5
epoch = 2024-06-01T08:00:00Z
hotspot {
  center = -15.84, -70.02
  sigma_m = 15
  count = 200
  start = 60
  end = 2024-06-01T08:03:00Z
}
hotspot {
  center = -15.85,-70.03
}
)");
    EXPECT_EQ(cfg.seed, 7u);
    EXPECT_EQ(cfg.population, 9600u);
    EXPECT_EQ(cfg.duration, 300s);
    EXPECT_EQ(cfg.tick, 30s);
    EXPECT_EQ(cfg.walk_step_sigma, 2.5);
    EXPECT_EQ(cfg.epoch, *parse_iso8601("2024-06-01T08:00:00Z"));
    ASSERT_EQ(cfg.hotspots.size(), 2u);
    EXPECT_EQ(cfg.hotspots[0].center, (geo::GeoPoint{-15.84, -70.02}));
    EXPECT_EQ(cfg.hotspots[0].sigma_m, 15.0);
    EXPECT_EQ(cfg.hotspots[0].count, 200u);
    EXPECT_EQ(cfg.hotspots[0].start, cfg.epoch + 60s);
    EXPECT_EQ(cfg.hotspots[0].end, cfg.epoch + 180s);
    EXPECT_EQ(cfg.hotspots[1].sigma_m, 20.0);
    EXPECT_EQ(cfg.hotspots[1].start, Timestamp::min());
}

TEST(ScenarioConfig, ErrorsNameTheLine)
{
    const auto expect_line = [](const char* text, const char* where) {
        try {
            parse_scenario(text, "s.conf");
            ADD_FAILURE() << text;
        } catch (const ArgumentError& e) {
            EXPECT_NE(std::string(e.what()).find(where), std::string::npos) << e.what();
        }
    };
    expect_line("seed = 1\ncolour = red\n", "s.conf:2");
    expect_line("population = -4\n", "s.conf:1");
    expect_line("hotspot {\n  count = 3\n}\n", "s.conf:3");
    expect_line("hotspot {\n  center = 1, 2\n", "unterminated");
    expect_line("seed\n", "s.conf:1");
}

TEST(ScenarioConfig, CampusPathIsRelativeToTheFile)
{
    testing_support::TempDir dir;
    testing_support::write_file(dir / "square.txt", "0,0\n0,1\n1,1\n1,0\n");
    testing_support::write_file(dir / "s.conf", "campus = square.txt\npopulation = 5\n");
    const auto cfg = read_scenario(dir / "s.conf");
    EXPECT_EQ(cfg.campus.size(), 4u);
    const auto ds = run_scenario(cfg);
    for (const auto& r : ds.reports) {
        EXPECT_TRUE(geo::point_in_polygon(cfg.campus, r.pos));
    }
    EXPECT_THROW(read_scenario(dir / "missing.conf"), IoError);
}

} // namespace
