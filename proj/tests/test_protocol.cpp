#include <gtest/gtest.h>

#include <map>

#include "dffl/protocol.hpp"
#include "dffl/simnet.hpp"
#include "scripted.hpp"

using namespace dffl;

namespace {

ParameterVector tiny(std::vector<double> v = {0.0, 0.0}, std::uint64_t payload = 100) {
  return ParameterVector({{1, v.size(), false}}, v, payload);
}

Job tiny_job(std::uint32_t rounds = 3, FusionMode mode = FusionMode::dynamic) {
  Job job;
  job.fusion_times = rounds;
  job.initial_params = tiny();
  job.initial_waiting_time = 120.0;
  job.mode = mode;
  return job;
}

Message upload(ClientId c, std::uint32_t round, std::vector<double> v, double weight, double acc = 0.9) {
  return make_message(MessageKind::UploadModel, round, c, ModelUpload{tiny(std::move(v)), weight, acc});
}

Message report(ClientId c, std::uint32_t round, double seconds) {
  return make_message(MessageKind::ReportTrainingTime, round, c, TrainingTime{seconds});
}

// Server with clients 1..n registered and round 1 open at t=0.
struct ServerFixture {
  explicit ServerFixture(std::size_t n, Job job = tiny_job(), double acc = 0.5)
      : accuracy(acc), server(job, ServerTimings{1.0, 0.0, 2.0}, n, [this](const ParameterVector& p, std::uint32_t r) {
          evaluated.emplace_back(r, p);
          return accuracy;
        }) {
    start = server.start(0.0);
    for (ClientId c = 1; c <= n; ++c) server.handle(make_message(MessageKind::DownloadJob, std::nullopt, c), 0.0);
  }
  double accuracy;
  std::vector<std::pair<std::uint32_t, ParameterVector>> evaluated;
  FusionServer server;
  ServerOutput start;
};

const Message* find_to(const ServerOutput& out, ClientId to, MessageKind kind) {
  for (const auto& ob : out.messages) {
    if (ob.to == to && ob.message.kind == kind) return &ob.message;
  }
  return nullptr;
}

}  // namespace

TEST(DecideParticipation, GlobalMaxIsInclusive) {
  ParticipationPolicy p;
  EXPECT_EQ(decide_participation(p, 0.80, 0.80), GateOutcome::upload);
  EXPECT_EQ(decide_participation(p, 0.79, 0.80), GateOutcome::skip);
  EXPECT_EQ(decide_participation(p, 1.0, 0.0), GateOutcome::upload);
}

TEST(DecideParticipation, LocalImprovementAndFirstRound) {
  ParticipationPolicy p{PolicyKind::local_improvement, true};
  EXPECT_EQ(decide_participation(p, 0.70, 0.65), GateOutcome::upload);
  EXPECT_EQ(decide_participation(p, 0.60, 0.65), GateOutcome::skip);
  EXPECT_EQ(decide_participation(p, 0.10, std::nullopt), GateOutcome::upload);
  p.first_round_uploads = false;
  EXPECT_EQ(decide_participation(p, 0.99, std::nullopt), GateOutcome::skip);
}

TEST(DecideParticipation, BoundaryAlwaysUploads) {
  ParticipationPolicy p;
  for (int i = 0; i <= 1000; ++i) {
    double a = i / 1000.0;
    EXPECT_EQ(decide_participation(p, a, a), GateOutcome::upload);
  }
}

TEST(WaitingTime, MeanSingletonFallback) {
  EXPECT_DOUBLE_EQ(update_waiting_time(std::vector<double>{100, 200, 300}, 1.0), 200.0);
  EXPECT_DOUBLE_EQ(update_waiting_time(std::vector<double>{42}, 1.0), 42.0);
  EXPECT_DOUBLE_EQ(update_waiting_time(std::vector<double>{}, 300.0), 300.0);
  EXPECT_THROW(update_waiting_time(std::vector<double>{10, 0}, 1.0), ValidationError);
  EXPECT_THROW(update_waiting_time(std::vector<double>{-1}, 1.0), ValidationError);
}

TEST(CloseRound, DeadlineBoundary) {
  ServerRoundState s;
  s.expected = {1, 2, 3};
  s.deadline = 10.0;
  s.received_models[1] = ReceivedModel{tiny(), 1.0, 0.9, 10.0};
  s.received_models[2] = ReceivedModel{tiny(), 1.0, 0.9, std::nextafter(10.0, 11.0)};
  s.skips[3] = SkipReceipt{0.3, 4.0};
  auto out = close_round(s, 10.0);
  EXPECT_EQ(out.participants, (std::set<ClientId>{1}));
  EXPECT_EQ(out.excluded_late, (std::set<ClientId>{2}));
  EXPECT_EQ(out.skipped, (std::set<ClientId>{3}));
  EXPECT_EQ(s.received_models.size(), 1u);
  EXPECT_EQ(s.decisions.at(1), Decision::uploaded);
  EXPECT_EQ(s.decisions.at(2), Decision::late);
  EXPECT_EQ(s.decisions.at(3), Decision::skipped);
}

TEST(CloseRound, BeforeDeadlineWithOutstandingClientsThrows) {
  ServerRoundState s;
  s.expected = {1, 2};
  s.deadline = 10.0;
  s.received_models[1] = ReceivedModel{tiny(), 1.0, 0.9, 3.0};
  EXPECT_THROW(close_round(s, 5.0), ProtocolError);
  s.skips[2] = SkipReceipt{0.1, 4.0};
  EXPECT_NO_THROW(close_round(s, 5.0));
}

TEST(CloseRound, AllSkipLeavesNoParticipants) {
  ServerRoundState s;
  s.expected = {1, 2, 3};
  s.deadline = 10.0;
  for (ClientId c : s.expected) s.skips[c] = SkipReceipt{0.2, 1.0};
  auto out = close_round(s, 1.0);
  EXPECT_TRUE(out.participants.empty());
  EXPECT_EQ(out.skipped.size(), 3u);
}

TEST(Server, StartEvaluatesInitialModelAndArmsDeadline) {
  ServerFixture f(3);
  ASSERT_EQ(f.evaluated.size(), 1u);
  EXPECT_EQ(f.evaluated[0].first, 0u);
  EXPECT_EQ(f.evaluated[0].second, tiny());
  ASSERT_TRUE(f.start.arm_timer);
  EXPECT_DOUBLE_EQ(f.start.arm_timer->first, 121.0);
  EXPECT_EQ(f.server.registered(), (std::set<ClientId>{1, 2, 3}));
}

TEST(Server, RequestMaxAccIsReadOnly) {
  ServerFixture f(3, tiny_job(), 0.6);
  auto before = f.server.round_state().reported_training_times;
  auto out = f.server.handle(make_message(MessageKind::RequestMaxAcc, 1, 2), 5.0);
  ASSERT_EQ(out.messages.size(), 1u);
  EXPECT_EQ(out.messages[0].to, 2u);
  EXPECT_EQ(out.messages[0].message.kind, MessageKind::MaxAccReply);
  EXPECT_DOUBLE_EQ(std::get<Accuracy>(out.messages[0].message.body).value, 0.6);
  EXPECT_EQ(f.server.round_state().reported_training_times, before);
  EXPECT_FALSE(out.arm_timer);
}

TEST(Server, UnknownClientRejected) {
  ServerFixture f(2);
  EXPECT_THROW(f.server.handle(make_message(MessageKind::RequestMaxAcc, 1, 9), 1.0), ProtocolError);
  EXPECT_THROW(f.server.handle(upload(9, 1, {1, 1}, 1.0), 1.0), ProtocolError);
}

TEST(Server, ServerOnlyKindsRejected) {
  ServerFixture f(2);
  EXPECT_THROW(f.server.handle(make_message(MessageKind::RoundClosed, 1, 1), 1.0), ProtocolError);
}

TEST(Server, LateJoinerRefused) {
  ServerFixture f(2);
  auto out = f.server.handle(make_message(MessageKind::DownloadJob, std::nullopt, 7), 1.0);
  ASSERT_EQ(out.messages.size(), 1u);
  EXPECT_EQ(out.messages[0].message.kind, MessageKind::Shutdown);
  EXPECT_EQ(f.server.registered().size(), 2u);
}

TEST(Server, DuplicateIdsGetFreshIds) {
  Job job = tiny_job();
  FusionServer s(job, {}, 3, [](const ParameterVector&, std::uint32_t) { return 0.5; });
  s.start(0.0);
  std::vector<ClientId> ids;
  for (int i = 0; i < 3; ++i) {
    auto out = s.handle(make_message(MessageKind::DownloadJob, std::nullopt, 1), 0.0);
    ids.push_back(out.messages.at(0).to);
    EXPECT_EQ(out.messages[0].message.kind, MessageKind::JobPayload);
    EXPECT_EQ(out.messages[0].message.client, out.messages[0].to);
  }
  EXPECT_EQ(ids, (std::vector<ClientId>{1, 2, 3}));
}

TEST(Server, DuplicateUploadFirstWins) {
  ServerFixture f(3);
  f.server.handle(upload(1, 1, {1, 1}, 1.0), 5.0);
  EXPECT_THROW(f.server.handle(upload(1, 1, {9, 9}, 1.0), 6.0), ProtocolError);
  f.server.on_timer(ServerTimer{1, 1}, 121.0);
  ASSERT_EQ(f.server.ledger().size(), 1u);
  EXPECT_EQ(f.server.ledger()[0].participant_count, 1u);
  EXPECT_EQ(f.server.global_model().values(), (std::vector<double>{1, 1}));
}

TEST(Server, DeadlineExpiryAggregatesExactlyTheOnTimeModels) {
  ServerFixture f(3);
  f.server.handle(report(1, 1, 10.0), 10.0);
  f.server.handle(report(2, 1, 20.0), 20.0);
  f.server.handle(upload(1, 1, {1, 1}, 1.0), 12.0);
  f.server.handle(upload(2, 1, {3, 5}, 3.0), 22.0);
  // Stale timer generations and early firings are ignored.
  EXPECT_TRUE(f.server.on_timer(ServerTimer{1, 0}, 121.0).messages.empty());
  EXPECT_TRUE(f.server.on_timer(ServerTimer{1, 1}, 100.0).messages.empty());
  auto out = f.server.on_timer(ServerTimer{1, 1}, 121.0);
  EXPECT_EQ(f.server.global_model().values(), (std::vector<double>{2.5, 4.0}));
  const auto& rec = f.server.ledger().at(0);
  EXPECT_EQ(rec.participant_count, 2u);
  EXPECT_EQ(rec.per_client.at(3).decision, Decision::late);
  EXPECT_DOUBLE_EQ(rec.per_client.at(1).upload_transfer_time, 2.0);
  EXPECT_DOUBLE_EQ(rec.per_client.at(3).upload_transfer_time, 0.0);
  EXPECT_TRUE(find_to(out, 1, MessageKind::GlobalModel));
  EXPECT_TRUE(find_to(out, 2, MessageKind::GlobalModel));
  EXPECT_TRUE(find_to(out, 3, MessageKind::RoundClosed));
  // Next round waits the mean of round 1's reports.
  EXPECT_DOUBLE_EQ(f.server.round_state().waiting_time, 15.0);
  ASSERT_TRUE(f.server.round_state().deadline);
  EXPECT_DOUBLE_EQ(*f.server.round_state().deadline, 121.0 + 1.0 + 15.0);
  // The late client's report for round 1 extends the open round's mean.
  auto late = f.server.handle(report(3, 1, 60.0), 125.0);
  EXPECT_DOUBLE_EQ(f.server.round_state().waiting_time, 30.0);
  EXPECT_TRUE(late.arm_timer);
  EXPECT_EQ(f.server.ledger()[0].per_client.at(3).training_time, 60.0);
}

TEST(Server, EarlyCloseWhenAllAnswered) {
  ServerFixture f(2);
  f.server.handle(upload(1, 1, {1, 1}, 1.0), 5.0);
  auto out = f.server.handle(make_message(MessageKind::SkipNotice, 1, 2, Accuracy{0.2}), 6.0);
  ASSERT_EQ(f.server.ledger().size(), 1u);
  EXPECT_DOUBLE_EQ(f.server.ledger()[0].closed_at, 6.0);
  EXPECT_EQ(f.server.round_state().round_index, 2u);
  EXPECT_TRUE(find_to(out, 2, MessageKind::RoundClosed));
}

TEST(Server, MessagesForClosedRoundDiscardedWithWarning) {
  ServerFixture f(1);
  f.server.handle(upload(1, 1, {1, 1}, 1.0), 5.0);
  ASSERT_EQ(f.server.round_state().round_index, 2u);
  f.server.handle(upload(1, 2, {1, 1}, 1.0), 6.0);
  ASSERT_EQ(f.server.round_state().round_index, 3u);
  auto out = f.server.handle(make_message(MessageKind::RequestMaxAcc, 1, 1), 7.0);
  EXPECT_TRUE(out.messages.empty());
  EXPECT_EQ(out.warnings.size(), 1u);
}

TEST(Server, CarryOverKeepsGlobalBitIdentical) {
  ServerFixture f(2);
  auto before = f.server.global_model();
  f.server.handle(make_message(MessageKind::SkipNotice, 1, 1, Accuracy{0.2}), 1.0);
  f.server.handle(make_message(MessageKind::SkipNotice, 1, 2, Accuracy{0.3}), 2.0);
  EXPECT_EQ(f.server.ledger().at(0).participant_count, 0u);
  EXPECT_EQ(f.server.global_model(), before);
  ASSERT_EQ(f.evaluated.size(), 2u);
  EXPECT_EQ(f.evaluated[1].second, before);
}

TEST(Server, BaselineHasNoDeadlineAndWaitsForAll) {
  ServerFixture f(2, tiny_job(2, FusionMode::baseline));
  EXPECT_FALSE(f.start.arm_timer);
  f.server.handle(upload(1, 1, {1, 1}, 1.0), 500.0);
  EXPECT_TRUE(f.server.ledger().empty());
  auto out = f.server.handle(upload(2, 1, {3, 3}, 1.0), 900.0);
  ASSERT_EQ(f.server.ledger().size(), 1u);
  EXPECT_FALSE(f.server.ledger()[0].deadline);
  EXPECT_DOUBLE_EQ(f.server.ledger()[0].waiting_time_used, 0.0);
  EXPECT_TRUE(find_to(out, 1, MessageKind::GlobalModel));
  EXPECT_TRUE(find_to(out, 2, MessageKind::GlobalModel));
}

TEST(Server, DisconnectCountsAsLateAndShrinksLaterRounds) {
  ServerFixture f(2);
  f.server.handle(upload(1, 1, {1, 1}, 1.0), 5.0);
  f.server.on_disconnect(2, 6.0);
  ASSERT_EQ(f.server.ledger().size(), 1u);
  EXPECT_EQ(f.server.ledger()[0].per_client.at(2).decision, Decision::late);
  EXPECT_EQ(f.server.round_state().expected, (std::set<ClientId>{1}));
  auto out = f.server.handle(make_message(MessageKind::RequestMaxAcc, 2, 2), 7.0);
  EXPECT_TRUE(out.messages.empty());
}

TEST(Server, FinalRoundShutsDownEveryone) {
  ServerFixture f(2, tiny_job(1));
  f.server.handle(upload(1, 1, {1, 1}, 1.0), 5.0);
  auto out = f.server.handle(upload(2, 1, {1, 1}, 1.0), 6.0);
  EXPECT_TRUE(out.finished);
  EXPECT_TRUE(f.server.finished());
  EXPECT_TRUE(find_to(out, 1, MessageKind::Shutdown));
  EXPECT_TRUE(find_to(out, 2, MessageKind::Shutdown));
}

namespace {

struct ClientFixture {
  explicit ClientFixture(Job j) : job(std::move(j)), client(1, 10.0) {
    auto out = client.handle(make_message(MessageKind::JobPayload, std::nullopt, 4, job));
    first = out.train;
  }
  TrainResult trained(double acc) { return {tiny({7, 7}), acc}; }
  ClientOutput finish(double acc) {
    client.set_training_result(client.current_round(), trained(acc), 3.0);
    return client.on_training_finished(client.current_round());
  }
  Job job;
  FusionClient client;
  std::optional<BeginTraining> first;
};

}  // namespace

TEST(Client, StartRequestsJob) {
  FusionClient c(5, 1.0);
  auto out = c.start();
  ASSERT_EQ(out.messages.size(), 1u);
  EXPECT_EQ(out.messages[0].kind, MessageKind::DownloadJob);
  EXPECT_EQ(out.messages[0].client, 5u);
  EXPECT_EQ(c.state().phase, ClientPhase::idle);
}

TEST(Client, JobStartsTrainingUnderAssignedId) {
  ClientFixture f(tiny_job());
  ASSERT_TRUE(f.first);
  EXPECT_EQ(f.first->round, 1u);
  EXPECT_EQ(f.first->start_params, tiny());
  EXPECT_EQ(f.client.state().client_id, 4u);
  EXPECT_EQ(f.client.state().phase, ClientPhase::training);
}

TEST(Client, ReportsTimeThenAsksForMaxAcc) {
  ClientFixture f(tiny_job());
  auto out = f.finish(0.8);
  ASSERT_EQ(out.messages.size(), 2u);
  EXPECT_EQ(out.messages[0].kind, MessageKind::ReportTrainingTime);
  EXPECT_DOUBLE_EQ(std::get<TrainingTime>(out.messages[0].body).seconds, 3.0);
  EXPECT_EQ(out.messages[1].kind, MessageKind::RequestMaxAcc);
  EXPECT_EQ(f.client.state().phase, ClientPhase::deciding);
}

TEST(Client, UploadThenGlobalModel) {
  ClientFixture f(tiny_job());
  f.finish(0.8);
  auto out = f.client.handle(make_message(MessageKind::MaxAccReply, 1, 4, Accuracy{0.8}));
  ASSERT_EQ(out.messages.size(), 1u);
  EXPECT_EQ(out.messages[0].kind, MessageKind::UploadModel);
  EXPECT_DOUBLE_EQ(std::get<ModelUpload>(out.messages[0].body).weight, 10.0);
  EXPECT_EQ(f.client.state().phase, ClientPhase::awaiting_global);
  auto g = f.client.handle(make_message(MessageKind::GlobalModel, 1, 4, tiny({2, 2})));
  ASSERT_TRUE(g.train);
  EXPECT_EQ(g.train->round, 2u);
  EXPECT_EQ(g.train->start_params, tiny({2, 2}));
  EXPECT_EQ(f.client.state().fed_step, 1u);
}

TEST(Client, SkipKeepsLocalModelAndMovesOn) {
  ClientFixture f(tiny_job());
  f.finish(0.4);
  auto out = f.client.handle(make_message(MessageKind::MaxAccReply, 1, 4, Accuracy{0.5}));
  ASSERT_EQ(out.messages.size(), 1u);
  EXPECT_EQ(out.messages[0].kind, MessageKind::SkipNotice);
  ASSERT_TRUE(out.train);
  EXPECT_EQ(out.train->round, 2u);
  EXPECT_EQ(out.train->start_params, tiny({7, 7}));
  EXPECT_EQ(f.client.state().last_local_acc, 0.4);
  // The skipped round's notice from the server is stale by now.
  auto stale = f.client.handle(make_message(MessageKind::RoundClosed, 1, 4));
  EXPECT_FALSE(stale.train);
  EXPECT_EQ(stale.warnings.size(), 1u);
}

TEST(Client, SkipWaitsForModelWhenDispatchedToAll) {
  Job job = tiny_job();
  job.dispatch = DispatchScope::all_clients;
  ClientFixture f(job);
  f.finish(0.4);
  auto out = f.client.handle(make_message(MessageKind::MaxAccReply, 1, 4, Accuracy{0.5}));
  EXPECT_FALSE(out.train);
  EXPECT_EQ(f.client.state().phase, ClientPhase::awaiting_global);
}

TEST(Client, PreemptedWhileTrainingReportsTime) {
  ClientFixture f(tiny_job());
  f.client.set_training_result(1, f.trained(0.9), 50.0);
  auto out = f.client.handle(make_message(MessageKind::RoundClosed, 1, 4));
  ASSERT_EQ(out.messages.size(), 1u);
  EXPECT_EQ(out.messages[0].kind, MessageKind::ReportTrainingTime);
  EXPECT_EQ(*out.messages[0].round, 1u);
  ASSERT_TRUE(out.train);
  EXPECT_EQ(out.train->start_params, tiny());
  auto stale = f.client.on_training_finished(1);
  EXPECT_TRUE(stale.messages.empty());
}

TEST(Client, LocalImprovementComparesWithPreviousRound) {
  Job job = tiny_job();
  job.policy = {PolicyKind::local_improvement, true};
  ClientFixture f(job);
  f.finish(0.5);
  auto first = f.client.handle(make_message(MessageKind::MaxAccReply, 1, 4, Accuracy{0.99}));
  EXPECT_EQ(first.messages.at(0).kind, MessageKind::UploadModel);
  f.client.handle(make_message(MessageKind::GlobalModel, 1, 4, tiny()));
  f.finish(0.45);
  auto second = f.client.handle(make_message(MessageKind::MaxAccReply, 2, 4, Accuracy{0.0}));
  EXPECT_EQ(second.messages.at(0).kind, MessageKind::SkipNotice);
}

TEST(Client, OutOfPhaseInputsRejected) {
  ClientFixture f(tiny_job());
  EXPECT_THROW(f.client.handle(make_message(MessageKind::MaxAccReply, 1, 4, Accuracy{0.5})), ProtocolError);
  EXPECT_THROW(f.client.handle(make_message(MessageKind::GlobalModel, 2, 4, tiny())), ProtocolError);
  EXPECT_THROW(f.client.handle(make_message(MessageKind::RequestMaxAcc, 1, 4)), ProtocolError);
  FusionClient idle(1, 1.0);
  EXPECT_THROW(idle.handle(make_message(MessageKind::GlobalModel, 1, 1, tiny())), ProtocolError);
}

TEST(Client, DoneAfterFusionTimes) {
  ClientFixture f(tiny_job(2));
  for (std::uint32_t r = 1; r <= 2; ++r) {
    f.finish(0.9);
    f.client.handle(make_message(MessageKind::MaxAccReply, r, 4, Accuracy{0.1}));
    auto out = f.client.handle(make_message(MessageKind::GlobalModel, r, 4, tiny()));
    EXPECT_EQ(out.done, r == 2);
    EXPECT_LE(f.client.state().fed_step, 2u);
  }
  EXPECT_EQ(f.client.state().phase, ClientPhase::done);
  auto after = f.client.handle(make_message(MessageKind::GlobalModel, 2, 4, tiny()));
  EXPECT_TRUE(after.messages.empty());
  EXPECT_FALSE(after.train);
}

TEST(DecisionTrace, MatchesHandTable) {
  auto run = scripted::run();
  EXPECT_EQ(decision_trace(run.result.ledger), scripted::expected_trace());
}

TEST(DecisionTrace, WaitingTimesAndLedgerInvariants) {
  auto run = scripted::run();
  const auto& ledger = run.result.ledger;
  ASSERT_EQ(ledger.size(), 5u);
  EXPECT_DOUBLE_EQ(ledger[0].waiting_time_used, 120.0);
  for (std::size_t r = 1; r < ledger.size(); ++r) EXPECT_DOUBLE_EQ(ledger[r].waiting_time_used, 40.0);
  for (std::size_t r = 0; r < ledger.size(); ++r) {
    const auto& rec = ledger[r];
    EXPECT_EQ(rec.round_index, r + 1);
    std::uint32_t uploads = 0;
    for (const auto& [id, e] : rec.per_client) {
      uploads += e.decision == Decision::uploaded;
      EXPECT_EQ(e.upload_transfer_time > 0.0, e.decision == Decision::uploaded);
    }
    EXPECT_EQ(rec.participant_count, uploads);
    EXPECT_DOUBLE_EQ(rec.global_acc_after, scripted::global_acc.at(rec.round_index));
    if (rec.deadline) {
      EXPECT_LE(rec.closed_at, *rec.deadline);
    }
  }
  // Round 5 had no participants: its evaluated model is the one after round 4.
  ASSERT_EQ(run.evaluated.size(), 6u);
  EXPECT_EQ(run.evaluated[5].second, run.evaluated[4].second);
  EXPECT_NE(run.evaluated[4].second, run.evaluated[3].second);
}

TEST(Baseline, RoundMatchesIndependentReplay) {
  auto a = generate_synthetic_dataset(60, 2, 2, {0.5, 0.5}, 4.0, 1);
  auto b = generate_synthetic_dataset(90, 2, 2, {0.3, 0.7}, 4.0, 2);
  auto test = generate_synthetic_dataset(50, 2, 2, {0.5, 0.5}, 4.0, 3);
  TrainerSpec trainer;
  trainer.epochs = 3;
  auto init = init_params(trainer, 2, 2, 100, 4);
  SyncServer server{init, &test, trainer, AggregationWeighting::dataset_size, 77};
  std::vector<SyncClient> clients{{1, &a}, {2, &b}};

  ParameterVector replay = init;
  for (std::uint32_t round = 1; round <= 3; ++round) {
    auto rec = run_baseline_round(clients, server);
    auto ra = train_local(replay, a, trainer, derive_seed(77, 1, round, Purpose::train));
    auto rb = train_local(replay, b, trainer, derive_seed(77, 2, round, Purpose::train));
    std::vector<double> mixed(replay.size());
    for (std::size_t i = 0; i < mixed.size(); ++i) {
      mixed[i] = (60.0 * ra.params.values()[i] + 90.0 * rb.params.values()[i]) / 150.0;
    }
    replay = replay.with_values(mixed);
    EXPECT_EQ(rec.participant_count, 2u);
    EXPECT_EQ(rec.round_index, round);
    for (std::size_t i = 0; i < mixed.size(); ++i) EXPECT_NEAR(server.global.values()[i], mixed[i], 1e-12);
    EXPECT_NEAR(rec.global_acc_after, evaluate(replay, test), 1e-12);
    EXPECT_DOUBLE_EQ(rec.global_acc_after, server.max_acc);
  }
}
