#include <gtest/gtest.h>

#include <cmath>

#include "ddon/ddm_engine.hpp"
#include "ddon/gp_boundary.hpp"

using namespace ddon;

namespace {

/// u = x on a 2D box: Dirichlet on the x faces, zero flux on the y faces.
PdeProblem linear_x(const Box& box) {
  PdeProblem p;
  p.box = box;
  p.bcs = {BoundaryCondition::dirichlet({0, Side::Low}, box.lo[0]), BoundaryCondition::dirichlet({0, Side::High}, box.hi[0]),
           BoundaryCondition::neumann({1, Side::Low}), BoundaryCondition::neumann({1, Side::High})};
  return p;
}

/// Laplace on [0,1]x[0,2] with GP Dirichlet data at y=0 and y=2 and zero flux on x=0, x=1.
PdeProblem gp_strip(int nx, std::uint64_t seed) {
  PdeProblem p;
  p.box = make_box({0, 0}, {1, 2});
  GpSpec spec;
  spec.seed = seed;
  std::vector<Point> pts;
  for (int i = 0; i < nx; ++i) pts.push_back({i / double(nx - 1), 0, 0});
  const auto d = sample_gp(spec, pts, 2);
  std::vector<double> lo(static_cast<std::size_t>(nx)), hi(static_cast<std::size_t>(nx));
  for (int i = 0; i < nx; ++i) {
    lo[static_cast<std::size_t>(i)] = d(0, i);
    hi[static_cast<std::size_t>(i)] = d(1, i);
  }
  p.bcs = {BoundaryCondition::dirichlet({1, Side::Low}, lo), BoundaryCondition::dirichlet({1, Side::High}, hi),
           BoundaryCondition::neumann({0, Side::Low}), BoundaryCondition::neumann({0, Side::High})};
  return p;
}

SolverList split(const PdeProblem& global, const GridCounts& gn, const std::vector<std::pair<Box, GridCounts>>& parts) {
  SolverList out;
  int k = 1;
  for (const auto& [box, n] : parts) {
    auto sp = subdomain_problem(global, gn, box, n);
    out.push_back(std::make_shared<ClassicalSolver>("D" + std::to_string(k++), sp.problem, n, sp.open));
  }
  return out;
}

Box rect(double x0, double y0, double x1, double y1) { return make_box({x0, y0}, {x1, y1}); }

}  // namespace

TEST(Schwarz, OneDimensionalPoisson) {
  PdeProblem p;
  p.box = make_box({0}, {1});
  p.source = 1;
  p.bcs = {BoundaryCondition::dirichlet({0, Side::Low}, 0.0), BoundaryCondition::dirichlet({0, Side::High}, 0.0)};
  const auto s = split(p, {101, 1, 1}, {{make_box({0}, {0.6}), {61, 1, 1}}, {make_box({0.4}, {1}), {61, 1, 1}}});
  DdmSchedule sched;
  sched.scheme = Scheme::Schwarz;
  sched.theta = 1.0;
  sched.epsilon = 1e-13;
  sched.max_iterations = 500;
  const auto r = run_schwarz(s, sched);
  EXPECT_TRUE(r.converged);
  const std::vector<Point> mid{{0.5, 0, 0}};
  EXPECT_NEAR(interpolate(r.fields[0], mid)[0], 0.125, 1e-6);
  EXPECT_NEAR(interpolate(r.fields[1], mid)[0], 0.125, 1e-6);
  EXPECT_EQ(r.residual_history.size(), r.iterations_used);
}

TEST(Schwarz, LinearMatchesOracle) {
  const auto p = linear_x(rect(0, 0, 2, 1));
  const GridCounts gn{41, 21, 1};
  const auto oracle = solve_elliptic(p, gn);
  const auto s = split(p, gn, {{rect(0, 0, 1.25, 1), {26, 21, 1}}, {rect(0.75, 0, 2, 1), {26, 21, 1}}});
  DdmSchedule sched;
  sched.theta = 1.0;
  sched.epsilon = 1e-9;
  const auto r = run_schwarz(s, sched);
  EXPECT_TRUE(r.converged);
  EXPECT_LE(r.iterations_used, 200u);
  EXPECT_LT(compare_fields(r.fields, oracle).ml2re, 1e-8);
}

TEST(Schwarz, ZeroOverlapRejected) {
  const auto p = linear_x(rect(0, 0, 2, 1));
  const auto s = split(p, {41, 21, 1}, {{rect(0, 0, 1, 1), {21, 21, 1}}, {rect(1, 0, 2, 1), {21, 21, 1}}});
  EXPECT_THROW(run_schwarz(s, DdmSchedule{}), NotOverlappingError);
}

TEST(Framework1, DirichletDirichletMatchesOracle) {
  const auto p = linear_x(rect(0, 0, 2, 1));
  const GridCounts gn{41, 21, 1};
  const auto oracle = solve_elliptic(p, gn);
  const auto s = split(p, gn, {{rect(0, 0, 1.25, 1), {26, 21, 1}}, {rect(0.75, 0, 2, 1), {26, 21, 1}}});
  DdmSchedule sched;
  sched.scheme = Scheme::Framework1;
  sched.theta = 0.5;
  sched.epsilon = 1e-10;
  sched.transmission = TransmissionRule::dirichlet_dirichlet();
  const auto r = run_framework1(s, sched);
  EXPECT_TRUE(r.converged);
  EXPECT_LE(r.iterations_used, 200u);
  EXPECT_LT(compare_fields(r.fields, oracle).ml2re, 1e-8);
  // residual strictly decreasing after iteration 2
  for (std::size_t i = 2; i < r.residual_history.size(); ++i)
    EXPECT_LT(r.residual_history[i], r.residual_history[i - 1]) << i;
}

TEST(Framework1, ThetaOneFreezesP) {
  const auto p = linear_x(rect(0, 0, 2, 1));
  const auto s = split(p, {41, 21, 1}, {{rect(0, 0, 1.25, 1), {26, 21, 1}}, {rect(0.75, 0, 2, 1), {26, 21, 1}}});
  DdmSchedule sched;
  sched.theta = 1.0;
  sched.max_iterations = 7;
  sched.epsilon = 1e-30;
  sched.initial_value = 0.3;
  const auto r = run_framework1(s, sched);
  for (double v : r.traces[0][0]) EXPECT_EQ(v, 0.3);
}

TEST(Framework1, ThetaZeroTakesPHat) {
  const auto p = linear_x(rect(0, 0, 2, 1));
  const auto s = split(p, {41, 21, 1}, {{rect(0, 0, 1.25, 1), {26, 21, 1}}, {rect(0.75, 0, 2, 1), {26, 21, 1}}});
  DdmSchedule sched;
  sched.theta = 0.0;
  sched.max_iterations = 3;
  sched.epsilon = 1e-30;
  const auto r = run_framework1(s, sched);
  const auto pts = face_points(s[0]->grid(), s[0]->open_faces()[0]);
  EXPECT_EQ(r.traces[0][0], trace_values(r.fields[1], pts));
}

TEST(Framework1, DirichletRobinNonOverlap) {
  const auto p = linear_x(rect(0, 0, 2, 1));
  const GridCounts gn{41, 21, 1};
  const auto oracle = solve_elliptic(p, gn);
  const auto s = split(p, gn, {{rect(0, 0, 1, 1), {21, 21, 1}}, {rect(1, 0, 2, 1), {21, 21, 1}}});
  DdmSchedule sched;
  sched.theta = 0.5;
  sched.epsilon = 1e-4;
  sched.transmission = TransmissionRule::dirichlet_robin();
  const auto r = run_framework1(s, sched);
  EXPECT_TRUE(r.converged);
  EXPECT_LT(compare_fields(r.fields, oracle).ml2re, 1e-3);
}

TEST(Framework1, DirichletRobinGpStrip) {
  const auto p = gp_strip(21, 4);
  const GridCounts gn{21, 41, 1};
  const auto oracle = solve_elliptic(p, gn);
  const auto s = split(p, gn, {{rect(0, 0, 1, 1), {21, 21, 1}}, {rect(0, 1, 1, 2), {21, 21, 1}}});
  DdmSchedule sched;
  sched.theta = 0.5;
  sched.epsilon = 1e-4;
  sched.transmission = TransmissionRule::dirichlet_robin();
  const auto r = run_framework1(s, sched);
  EXPECT_TRUE(r.converged);
  EXPECT_LT(compare_fields(r.fields, oracle).ml2re, 1e-3);
}

TEST(Framework1, DivergingSchemeReported) {
  // Dirichlet-Neumann exchange with the Neumann side much larger diverges without relaxation
  const auto p = linear_x(rect(0, 0, 2, 1));
  const auto s = split(p, {41, 21, 1}, {{rect(0, 0, 1.5, 1), {31, 21, 1}}, {rect(1.5, 0, 2, 1), {11, 21, 1}}});
  DdmSchedule sched;
  sched.theta = 0.0;
  sched.max_iterations = 500;
  sched.epsilon = 1e-12;
  sched.transmission = {1, 0, 0, 1};
  EXPECT_THROW(run_framework1(s, sched), DivergenceError);
}

TEST(Framework2, TwoSubdomainsMatchOracle) {
  const auto p = linear_x(rect(0, 0, 2, 1));
  const GridCounts gn{41, 21, 1};
  const auto oracle = solve_elliptic(p, gn);
  const auto s = split(p, gn, {{rect(0, 0, 1, 1), {21, 21, 1}}, {rect(1, 0, 2, 1), {21, 21, 1}}});
  DdmSchedule sched;
  sched.theta = 0.5;
  sched.epsilon = 1e-12;
  sched.max_iterations = 2000;
  const auto r = run_framework2(s, sched);
  EXPECT_TRUE(r.converged);
  EXPECT_LT(compare_fields(r.fields, oracle).ml2re, 1e-8);
  EXPECT_LT(interface_gap(r.fields[0], r.fields[1]), 10 * sched.epsilon);
}

TEST(Framework2, ZeroIterationsLeavesZeroFields) {
  const auto p = linear_x(rect(0, 0, 2, 1));
  const auto s = split(p, {9, 5, 1}, {{rect(0, 0, 1, 1), {5, 5, 1}}, {rect(1, 0, 2, 1), {5, 5, 1}}});
  DdmSchedule sched;
  sched.max_iterations = 0;
  for (const auto& r : {run_framework2(s, sched), run_schwarz(split(p, {9, 5, 1}, {{rect(0, 0, 1.25, 1), {6, 5, 1}},
                                                                                   {rect(0.75, 0, 2, 1), {6, 5, 1}}}),
                                                             sched)}) {
    EXPECT_FALSE(r.converged);
    EXPECT_EQ(r.iterations_used, 0u);
    EXPECT_TRUE(r.residual_history.empty());
    ASSERT_EQ(r.fields.size(), 2u);
    for (const auto& f : r.fields)
      for (double v : f.values) EXPECT_EQ(v, 0.0);
  }
}

TEST(Framework2, ChainOfThreeAndSolveOrder) {
  const auto p = linear_x(rect(0, 0, 3, 1));
  const GridCounts gn{61, 21, 1};
  const auto oracle = solve_elliptic(p, gn);
  const std::vector<std::pair<Box, GridCounts>> parts{
      {rect(0, 0, 1, 1), {21, 21, 1}}, {rect(1, 0, 2, 1), {21, 21, 1}}, {rect(2, 0, 3, 1), {21, 21, 1}}};
  DdmSchedule sched;
  sched.theta = 0.5;
  sched.epsilon = 1e-11;
  sched.max_iterations = 5000;
  const auto a = run_framework2(split(p, gn, parts), sched);
  EXPECT_TRUE(a.converged);
  EXPECT_LT(compare_fields(a.fields, oracle).ml2re, 1e-7);
  EXPECT_LT(interface_gap(a.fields[0], a.fields[1]), 1e-6);
  EXPECT_LT(interface_gap(a.fields[1], a.fields[2]), 1e-6);

  sched.solve_order = {2, 0, 1};
  const auto b = run_framework2(split(p, gn, parts), sched);
  sched.solve_order = {};
  sched.threads = 3;
  const auto c = run_framework2(split(p, gn, parts), sched);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(a.fields[i].values, b.fields[i].values);
    EXPECT_EQ(a.fields[i].values, c.fields[i].values);
  }
  EXPECT_EQ(a.residual_history, b.residual_history);
}

TEST(Framework2, ThetaEndpoints) {
  const auto p = linear_x(rect(0, 0, 2, 1));
  const GridCounts gn{41, 21, 1};
  const auto s = split(p, gn, {{rect(0, 0, 1, 1), {21, 21, 1}}, {rect(1, 0, 2, 1), {21, 21, 1}}});
  DdmSchedule sched;
  sched.theta = 0.0;
  sched.max_iterations = 4;
  sched.epsilon = 1e-30;
  sched.initial_value = 0.25;
  const auto frozen = run_framework2(s, sched);
  for (const auto& tr : frozen.traces)
    for (double v : tr[0]) EXPECT_EQ(v, 0.25);

  sched.theta = 1.0;
  sched.max_iterations = 1;
  const auto one = run_framework2(s, sched);
  const auto pts = face_points(s[0]->grid(), s[0]->open_faces()[0]);
  const auto u2 = trace_values(one.fields[1], pts);
  for (std::size_t k = 0; k < pts.size(); ++k) EXPECT_EQ(one.traces[0][0][k], 2 * u2[k] - 0.25);
}

TEST(Framework2, OracleTracesAreFixedPoint) {
  const auto p = gp_strip(21, 9);
  const GridCounts gn{21, 41, 1};
  const auto oracle = solve_elliptic(p, gn);
  const auto s = split(p, gn, {{rect(0, 0, 1, 1), {21, 21, 1}}, {rect(0, 1, 1, 2), {21, 21, 1}}});
  std::vector<std::vector<std::vector<double>>> init;
  for (const auto& x : s) {
    auto* c = dynamic_cast<ClassicalSolver*>(x.get());
    c->prepare({{c->open_faces()[0], BcKind::Robin, 1.0, 1.0}});
    init.push_back(c->consistent_data(restrict(oracle, c->box(), c->grid().counts())));
  }
  DdmSchedule sched;
  sched.theta = 0.5;
  sched.max_iterations = 1;
  sched.initial_traces = init;
  const auto r = run_framework2(s, sched);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t k = 0; k < init[i][0].size(); ++k) EXPECT_NEAR(r.traces[i][0][k], init[i][0][k], 1e-8);
  EXPECT_LT(compare_fields(r.fields, oracle).ml2re, 1e-10);
}

TEST(Framework2, OverlapRejected) {
  const auto p = linear_x(rect(0, 0, 2, 1));
  const auto s = split(p, {41, 21, 1}, {{rect(0, 0, 1.25, 1), {26, 21, 1}}, {rect(0.75, 0, 2, 1), {26, 21, 1}}});
  EXPECT_THROW(run_framework2(s, DdmSchedule{}), OverlapError);
}

TEST(Framework2, MultimediumMatchesMonolithic) {
  const auto stack = MaterialStack::cubes(1.0, 0.4, 0.3, 0.3, 10.0, 0.1);
  const GridCounts nl{11, 11, 11}, nu{5, 5, 5};
  const auto [lo_ref, up_ref] = solve_multimedium(stack, nl, nu);
  const auto blocks = multimedium_blocks(stack, nl, nu);
  SolverOptions opts;
  opts.default_neumann = true;
  auto to_problem = [](const Block& b) {
    PdeProblem p;
    p.box = b.grid.box();
    p.diffusion = b.diffusion;
    p.source = b.source;
    p.bcs = b.bcs;
    return p;
  };
  const Box footprint = intersect(stack.lower, stack.upper);
  SolverList s{std::make_shared<ClassicalSolver>("lower", to_problem(blocks[0]), nl,
                                                 std::vector<OpenBoundary>{{{2, Side::High}, footprint}}, opts),
               std::make_shared<ClassicalSolver>("upper", to_problem(blocks[1]), nu,
                                                 std::vector<OpenBoundary>{{{2, Side::Low}}}, opts)};
  DdmSchedule sched;
  sched.theta = 0.5;
  sched.epsilon = 1e-12;
  sched.max_iterations = 20000;
  const auto r = run_framework2(s, sched);
  EXPECT_TRUE(r.converged) << r.iterations_used;
  const std::vector<Field> ref{lo_ref, up_ref};
  EXPECT_LT(compare_fields(r.fields, ref).ml2re, 1e-6);
}

TEST(SubdomainProblem, OpenFacesAndRestrictedData) {
  const auto p = gp_strip(21, 2);
  const auto sp = subdomain_problem(p, {21, 41, 1}, rect(0, 0, 1, 1), {11, 11, 1});
  ASSERT_EQ(sp.open.size(), 1u);
  EXPECT_EQ(sp.open[0].face, (Face{1, Side::High}));
  ASSERT_EQ(sp.problem.bcs.size(), 3u);
  for (const auto& bc : sp.problem.bcs)
    if (bc.kind == BcKind::Dirichlet) {
      ASSERT_EQ(bc.data.size(), 11u);
      EXPECT_EQ(bc.data[5], p.bcs[0].data[10]);
    }
}

TEST(NeuralSolver, SensorWidthChecked) {
  const auto net = std::make_shared<OperatorNet>(OperatorNet::create({{{5, 8}}, {2, 8}}, 1));
  StructuredGrid g(rect(0, 0, 1, 1), {9, 9});
  const std::vector<OpenFace> cond{{{1, Side::High}, BcKind::Robin, 1.0, 1.0}};
  EXPECT_NO_THROW(NeuralSolver("n", net, g, cond, {BranchSource::face(0, {5, 1, 1})}));
  EXPECT_THROW(NeuralSolver("n", net, g, cond, {BranchSource::face(0, {7, 1, 1})}), ShapeError);
  NeuralSolver ok("n", net, g, cond, {BranchSource::face(0, {5, 1, 1})});
  EXPECT_THROW(ok.prepare({{{1, Side::High}, BcKind::Dirichlet}}), PreconditionError);
}

TEST(NeuralSolver, SensorResamplingExactForLinearData) {
  const auto net = std::make_shared<OperatorNet>(OperatorNet::create({{{5, 8}}, {2, 8}}, 1));
  StructuredGrid g(rect(0, 0, 1, 1), {9, 9});
  NeuralSolver n("n", net, g, {{{1, Side::High}, BcKind::Dirichlet}}, {BranchSource::face(0, {5, 1, 1})});
  std::vector<double> data;
  for (const auto& q : face_points(g, {1, Side::High})) data.push_back(2 * q[0] + 1);
  const auto in = n.branch_inputs({data});
  ASSERT_EQ(in[0].size(), 5u);
  for (std::size_t k = 0; k < 5; ++k) EXPECT_NEAR(in[0][k], 2 * (k / 4.0) + 1, 1e-14);
}

TEST(IterationFree, SingleSubdomainEqualsForward) {
  const auto net = std::make_shared<OperatorNet>(OperatorNet::create({{{3, 8, 8}, {2, 8, 8}}, {2, 8, 8}}, 4));
  StructuredGrid g(rect(0, 0, 1, 1), {6, 6});
  auto n = std::make_shared<NeuralSolver>("n", net, g, std::vector<OpenFace>{},
                                          std::vector<BranchSource>{BranchSource::constant({1, 2, 3}),
                                                                    BranchSource::constant({4, 5})});
  const std::vector<std::vector<double>> in{{0.1, 0.2, 0.3}, {0.4, 0.5}};
  const auto r = run_iteration_free({n}, {in});
  EXPECT_EQ(r.iterations_used, 0u);
  EXPECT_TRUE(r.converged);
  EXPECT_EQ(r.fields[0].values, net->forward(in, g.nodes()));
}
