// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>
#include <httplib.h>

#include <thread>

#include "shortlens/error.hpp"
#include "shortlens/pipeline/pipeline.hpp"
#include "shortlens/service/service.hpp"
#include "test_support.hpp"

using namespace shortlens;
using namespace shortlens::service;
using pipeline::Pipeline;
using test_support::TempDir;

namespace {

class ServiceTest : public ::testing::Test {
 protected:
  ServiceTest() : dir_("service"), service_(dir_.path()) {}

  Pipeline detected(const std::string& id) {
    auto p = Pipeline::open_or_create(service_.store(), id, test_support::small_pipeline());
    p.generate_data();
    p.train();
    p.export_activations();
    p.detect();
    return p;
  }

  TempDir dir_;
  Service service_;
};

}  // namespace

TEST_F(ServiceTest, UnknownRunAndRoute) {
  EXPECT_EQ(service_.handle("GET", "/runs/nope").status, 404);
  EXPECT_EQ(service_.handle("GET", "/runs/nope/clusters").status, 404);
  EXPECT_EQ(service_.handle("GET", "/elsewhere").status, 404);
  EXPECT_EQ(service_.handle("DELETE", "/runs").status, 405);
  const auto r = service_.handle("GET", "/runs");
  EXPECT_EQ(r.status, 200);
  EXPECT_TRUE(r.body["runs"].empty());
}

TEST_F(ServiceTest, StagesNotReachedAreConflicts) {
  auto p = Pipeline::open_or_create(service_.store(), "early", test_support::small_pipeline());
  p.generate_data();
  const auto clusters = service_.handle("GET", "/runs/early/clusters");
  EXPECT_EQ(clusters.status, 409);
  EXPECT_EQ(clusters.body["error"], "stage 'train' incomplete");
  EXPECT_EQ(service_.handle("GET", "/runs/early/metrics").status, 409);
  EXPECT_EQ(service_.handle("POST", "/runs/early/mitigate").status, 409);
  const auto run = service_.handle("GET", "/runs/early");
  EXPECT_EQ(run.status, 200);
  EXPECT_EQ(run.body["stages"]["data"], true);
  EXPECT_EQ(run.body["stages"]["trained"], false);
}

TEST_F(ServiceTest, ClustersAndPrototypes) {
  detected("r");
  const auto c = service_.handle("GET", "/runs/r/clusters");
  ASSERT_EQ(c.status, 200);
  EXPECT_EQ(c.body["K"], 2);
  EXPECT_EQ(c.body["clusters"].size(), 2u);
  EXPECT_TRUE(c.body["selection"].is_null());

  EXPECT_EQ(service_.handle("GET", "/runs/r/prototypes").status, 400);
  EXPECT_EQ(service_.handle("GET", "/runs/r/prototypes", {{"cluster", "7"}}).status, 400);
  EXPECT_EQ(service_.handle("GET", "/runs/r/prototypes", {{"cluster", "-1"}}).status, 400);
  const auto pr = service_.handle("GET", "/runs/r/prototypes", {{"cluster", "1"}, {"limit", "3"}});
  ASSERT_EQ(pr.status, 200);
  ASSERT_EQ(pr.body["patches"].size(), 3u);
  EXPECT_EQ(pr.body["patches"][0]["rank"], 0);
  EXPECT_GE(pr.body["patches"][0]["score"].get<double>(), pr.body["patches"][1]["score"].get<double>());
  EXPECT_EQ(pr.body["patches"][0]["png_base64"].get<std::string>().rfind("iVBORw0KGgo", 0), 0u);
  EXPECT_EQ(service_.handle("GET", "/runs/r/concepts").status, 409);
}

TEST_F(ServiceTest, SelectThenMitigateIsIdempotent) {
  detected("r");
  EXPECT_EQ(service_.handle("POST", "/runs/r/select", {}, "{not json").status, 400);
  EXPECT_EQ(service_.handle("POST", "/runs/r/select", {}, R"({"cluster": -1})").status, 400);
  EXPECT_EQ(service_.handle("POST", "/runs/r/select", {}, R"({"cluster": 5})").status, 400);
  EXPECT_EQ(service_.handle("POST", "/runs/r/select", {}, R"({"source": "oracle"})").status, 400);

  const auto s = service_.handle("POST", "/runs/r/select", {}, R"({"cluster": 1})");
  ASSERT_EQ(s.status, 200);
  EXPECT_EQ(s.body["cached"], false);
  EXPECT_EQ(s.body["selection"]["source"], "expert");
  EXPECT_EQ(s.body["selection"]["cluster"], 1);
  EXPECT_EQ(service_.handle("POST", "/runs/r/select", {}, R"({"cluster": 1})").body["cached"], true);

  const auto m1 = service_.handle("POST", "/runs/r/mitigate");
  ASSERT_EQ(m1.status, 200);
  EXPECT_EQ(m1.body["cached"], false);
  const auto m2 = service_.handle("POST", "/runs/r/mitigate");
  EXPECT_EQ(m2.body["cached"], true);
  EXPECT_EQ(m1.body["metrics"], m2.body["metrics"]);
  EXPECT_EQ(service_.handle("GET", "/runs/r/metrics").body, m1.body["metrics"]);

  const auto a = service_.handle("POST", "/runs/r/select", {}, R"({"source": "auto"})");
  ASSERT_EQ(a.status, 200);
  EXPECT_EQ(a.body["selection"]["source"], "auto");
}

TEST_F(ServiceTest, FailedConceptsAreBadGateway) {
  auto p = detected("r");
  struct Down final : concepts::Captioner {
    std::string id() const override { return "down"; }
    std::string caption(const Image&, std::string_view) override { throw ProviderError("x"); }
  } down;
  concepts::StubRefiner ref;
  pipeline::ProviderSettings s;
  s.caption.retries = 0;
  p.concepts(down, ref, s);
  const auto r = service_.handle("GET", "/runs/r/concepts");
  EXPECT_EQ(r.status, 502);
  EXPECT_EQ(r.body["concepts"]["status"], "failed");
  concepts::StubCaptioner stub;
  p.concepts(stub, ref, s);
  const auto ok = service_.handle("GET", "/runs/r/concepts");
  EXPECT_EQ(ok.status, 200);
  EXPECT_EQ(ok.body["status"], "complete");
}

TEST_F(ServiceTest, OverRealHttp) {
  detected("r");
  httplib::Server server;
  service_.bind(server);
  const int port = server.bind_to_any_port("127.0.0.1");
  std::thread t([&] { server.listen_after_bind(); });
  server.wait_until_ready();
  httplib::Client client("127.0.0.1", port);
  auto list = client.Get("/runs");
  ASSERT_TRUE(list);
  EXPECT_EQ(list->status, 200);
  EXPECT_EQ(json::parse(list->body)["runs"][0]["run_id"], "r");
  auto proto = client.Get("/runs/r/prototypes?cluster=0&limit=2");
  ASSERT_TRUE(proto);
  EXPECT_EQ(json::parse(proto->body)["patches"].size(), 2u);
  auto sel = client.Post("/runs/r/select", R"({"cluster": 0})", "application/json");
  ASSERT_TRUE(sel);
  EXPECT_EQ(sel->status, 200);
  auto missing = client.Get("/runs/zzz/metrics");
  ASSERT_TRUE(missing);
  EXPECT_EQ(missing->status, 404);
  server.stop();
  t.join();
}
