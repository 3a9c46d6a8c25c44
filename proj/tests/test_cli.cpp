#include <gtest/gtest.h>

#include "crowdsense/model.hpp"
#include "support.hpp"

namespace {

using testing_support::lines_of;
using testing_support::read_file;
using testing_support::run;
using testing_support::TempDir;
using testing_support::write_file;

const std::string kCli = CROWDSENSE_CLI;

testing_support::RunResult cli(std::vector<std::string> args)
{
    args.insert(args.begin(), kCli);
    return run(std::move(args));
}

TEST(Cli, HelpAndUsageErrors)
{
    const auto help = cli({"--help"});
    EXPECT_EQ(help.exit_code, 0);
    EXPECT_NE(help.out.find("simulate"), std::string::npos);
    EXPECT_NE(help.out.find("serve"), std::string::npos);
    EXPECT_EQ(cli({}).exit_code, 2);
    EXPECT_EQ(cli({"frobnicate"}).exit_code, 2);
    EXPECT_EQ(cli({"simulate", "--population", "-1", "--out", "/tmp/x.ndjson"}).exit_code, 2);
    EXPECT_EQ(cli({"cluster", "--in", "x.ndjson", "--out", "y", "--min-samples", "0"}).exit_code, 2);
    EXPECT_EQ(cli({"cluster", "--in", "x.ndjson", "--out", "y", "--metric", "manhattan"}).exit_code, 2);
}

TEST(Cli, HelpMarksWhereDefaultsComeFrom)
{
    const auto r = cli({"cluster", "--help"});
    EXPECT_EQ(r.exit_code, 0);
    EXPECT_NE(r.out.find("published setting"), std::string::npos);
    EXPECT_NE(r.out.find("artifact default"), std::string::npos);
}

TEST(Cli, MissingInputIsADataError)
{
    TempDir dir;
    const auto r = cli({"cluster", "--in", dir / "absent.ndjson", "--out", dir / "c.ndjson"});
    EXPECT_EQ(r.exit_code, 1);
    EXPECT_NE(r.err.find("absent.ndjson"), std::string::npos);
}

TEST(Cli, MalformedLineFailsUnlessSkipped)
{
    TempDir dir;
    write_file(dir / "d.ndjson", std::string(R"({"id":"a","lat":-15.84,"lon":-70.02,"ts":"2024-05-01T14:30:00Z"})") +
                                     "\n{broken\n");
    const auto strict = cli({"cluster", "--in", dir / "d.ndjson", "--out", dir / "c.ndjson"});
    EXPECT_EQ(strict.exit_code, 1);
    EXPECT_NE(strict.err.find("d.ndjson:2:"), std::string::npos);
    const auto lenient = cli({"cluster", "--in", dir / "d.ndjson", "--out", dir / "c.ndjson", "--skip-bad-lines"});
    EXPECT_EQ(lenient.exit_code, 0) << lenient.err;
}

TEST(Cli, SimulateIsDeterministic)
{
    TempDir dir;
    ASSERT_EQ(cli({"simulate", "--seed", "42", "--out", dir / "a.ndjson"}).exit_code, 0);
    ASSERT_EQ(cli({"simulate", "--seed", "42", "--out", dir / "b.ndjson"}).exit_code, 0);
    ASSERT_EQ(cli({"simulate", "--seed", "43", "--out", dir / "c.ndjson"}).exit_code, 0);
    const auto a = read_file(dir / "a.ndjson");
    EXPECT_EQ(lines_of(a).size(), 9000u);
    EXPECT_EQ(a, read_file(dir / "b.ndjson"));
    EXPECT_NE(a, read_file(dir / "c.ndjson"));
    ASSERT_EQ(cli({"simulate", "--seed", "42", "--out", dir / "a.csv"}).exit_code, 0);
    const auto csv = crowdsense::model::read_dataset((dir / "a.csv"), crowdsense::model::Format::Csv);
    const auto nd = crowdsense::model::read_dataset((dir / "a.ndjson"), crowdsense::model::Format::Ndjson);
    EXPECT_EQ(csv.reports, nd.reports);
}

TEST(Cli, EmptyDatasetGivesEmptyOutputs)
{
    TempDir dir;
    write_file(dir / "empty.ndjson", "");
    const auto c = cli({"cluster", "--in", dir / "empty.ndjson", "--out", dir / "c.ndjson"});
    EXPECT_EQ(c.exit_code, 0) << c.err;
    EXPECT_EQ(read_file(dir / "c.ndjson"), "");
    const auto h = cli({"heatmap", "--in", dir / "empty.ndjson", "--out-dir", dir / "hm"});
    EXPECT_EQ(h.exit_code, 0) << h.err;
    const auto grid = read_file(dir / "hm/frame_0000.csv");
    ASSERT_FALSE(grid.empty());
    EXPECT_EQ(grid.find_first_not_of("0,\n"), std::string::npos);
    EXPECT_NE(read_file(dir / "hm/frame_0000.txt").find("total=0\n"), std::string::npos);
}

TEST(Cli, ClusterDefaultsAreThePublishedSettings)
{
    TempDir dir;
    ASSERT_EQ(cli({"simulate", "--seed", "7", "--out", dir / "d.ndjson", "--hotspot", "-15.84,-70.02,20,200"}).exit_code,
              0);
    ASSERT_EQ(cli({"cluster", "--in", dir / "d.ndjson", "--out", dir / "a.ndjson", "--labels", dir / "a.csv"}).exit_code,
              0);
    ASSERT_EQ(cli({"cluster", "--in", dir / "d.ndjson", "--out", dir / "b.ndjson", "--eps", "0.0007", "--min-samples",
                   "4", "--metric", "degrees"})
                  .exit_code,
              0);
    const auto a = read_file(dir / "a.ndjson");
    EXPECT_FALSE(a.empty());
    EXPECT_EQ(a, read_file(dir / "b.ndjson"));
    EXPECT_EQ(lines_of(read_file(dir / "a.csv")).size(), 9001u); // header + one row per point
}

TEST(Cli, AlertsAndPipelineOutputs)
{
    TempDir dir;
    const std::vector<std::string> scenario{"--seed", "3", "--duration", "120", "--hotspot", "-15.84,-70.02,20,200"};
    auto args = std::vector<std::string>{"pipeline", "--out-dir", dir / "run", "--max-radius", "400"};
    args.insert(args.end(), scenario.begin(), scenario.end());
    const auto r = cli(args);
    ASSERT_EQ(r.exit_code, 0) << r.err;
    for (const char* f : {"dataset.ndjson", "clusters.ndjson", "labels.csv", "alerts.ndjson", "heatmaps/frame_0002.pgm"}) {
        EXPECT_TRUE(std::filesystem::exists(dir.path() / "run" / f)) << f;
    }
    const auto log = lines_of(read_file(dir / "run/alerts.ndjson"));
    ASSERT_FALSE(log.empty());
    EXPECT_NE(log.front().find(R"("state":"raised")"), std::string::npos);

    const auto al = cli({"alerts", "--in", dir / "run/dataset.ndjson", "--out", dir / "alerts.ndjson",
                         "--max-radius", "400"});
    ASSERT_EQ(al.exit_code, 0) << al.err;
    EXPECT_EQ(read_file(dir / "alerts.ndjson"), read_file(dir / "run/alerts.ndjson"));
}

TEST(Cli, ServeStopsCleanlyOnSigterm)
{
    TempDir dir;
    write_file(dir / "salt", "s3cret\n");
    testing_support::Process serve(
        {kCli, "serve", "--listen", "127.0.0.1:0", "--snapshot-listen", "127.0.0.1:0", "--salt-file", dir / "salt"});
    const auto l1 = serve.read_line();
    const auto l2 = serve.read_line();
    ASSERT_TRUE(l1 && l2);
    EXPECT_EQ(l1->rfind("ingest listening on port ", 0), 0u);
    const auto port = l2->substr(l2->rfind(' ') + 1);
    const auto snap = cli({"snapshot", "--target", "127.0.0.1:" + port});
    EXPECT_EQ(snap.exit_code, 0) << snap.err;
    EXPECT_NE(snap.out.find(R"("status":"empty")"), std::string::npos);
    EXPECT_EQ(serve.stop(), 0);
    EXPECT_EQ(serve.drain(), "stopped: lines=0 accepted=0 rejected=0 outside_campus=0\n");
}

TEST(Cli, ReplayToNothingFails)
{
    TempDir dir;
    write_file(dir / "d.ndjson", R"({"id":"a","lat":-15.84,"lon":-70.02,"ts":"2024-05-01T14:30:00Z"})"
                                 "\n");
    EXPECT_EQ(cli({"replay", "--in", dir / "d.ndjson", "--target", "127.0.0.1:1"}).exit_code, 1);
    EXPECT_EQ(cli({"replay", "--in", dir / "d.ndjson", "--target", "nonsense"}).exit_code, 2);
}

} // namespace
