#include <set>
#include <tuple>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "exp3cil/hyperspace.hpp"

using namespace exp3cil;

namespace {

GridSpec small_grid() { return GridSpec{{0, 1}, {0, 1}, {0.1}, {0, 1}}; }

ErrorCode code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected an Error";
  return ErrorCode::kIo;
}

}  // namespace

TEST(Hyperspace, ProductEnumeration) {
  const auto space = ActionSpace::build_grid(small_grid());
  ASSERT_EQ(space.size(), 8u);
  EXPECT_EQ(space.action_at(0), (Action{0, 0, 0.1, 0}));
  EXPECT_EQ(space.action_at(7), (Action{1, 1, 0.1, 1}));
  EXPECT_EQ(space.action_at(1), (Action{0, 0, 0.1, 1}));
  EXPECT_EQ(space.action_at(2), (Action{0, 1, 0.1, 0}));
}

TEST(Hyperspace, DefaultGridHas48Actions) {
  const auto space = ActionSpace::build_grid(GridSpec::defaults());
  EXPECT_EQ(space.size(), 4u * 3u * 2u * 2u);
  std::set<std::tuple<double, double, double, int>> seen;
  for (const auto& a : space.actions()) seen.emplace(a.beta, a.gamma, a.lambda, a.delta);
  EXPECT_EQ(seen.size(), 48u);
}

TEST(Hyperspace, Errors) {
  EXPECT_EQ(code_of([] { ActionSpace::build_grid(GridSpec{{1}, {0}, {0.1}, {0}}); }), ErrorCode::kInvalidGrid);
  EXPECT_EQ(code_of([] { ActionSpace::build_grid(GridSpec{{}, {0}, {0.1}, {0, 1}}); }), ErrorCode::kInvalidGrid);
  EXPECT_EQ(code_of([] { ActionSpace::build_grid(GridSpec{{0, 1}, {0}, {0.1}, {2}}); }), ErrorCode::kInvalidGrid);
  EXPECT_EQ(code_of([] { ActionSpace::build_grid(GridSpec{{0, 0}, {0}, {0.1}, {0}}); }), ErrorCode::kInvalidGrid);
  EXPECT_EQ(code_of([] { ActionSpace::build_grid(GridSpec{{0, 1}, {0}, {0.0}, {0}}); }), ErrorCode::kInvalidGrid);
  const auto space = ActionSpace::build_grid(small_grid());
  EXPECT_EQ(code_of([&] { space.action_at(8); }), ErrorCode::kIndex);
  EXPECT_EQ(code_of([&] { space.index_of(Action{2, 0, 0.1, 0}); }), ErrorCode::kNotFound);
  EXPECT_FALSE(space.contains(Action{2, 0, 0.1, 0}));
}

// Property: index_of inverts action_at on every grid.
TEST(HyperspaceProperty, IndexRoundTrip) {
  for (const auto& g : {small_grid(), GridSpec::defaults(), GridSpec{{0.5, 3}, {0, 2, 4}, {0.01, 0.02, 0.03}, {1}}}) {
    const auto space = ActionSpace::build_grid(g);
    for (std::size_t i = 0; i < space.size(); ++i) {
      EXPECT_EQ(space.index_of(space.action_at(i)), i);
      EXPECT_TRUE(space.contains(space.action_at(i)));
    }
  }
}

TEST(Hyperspace, ActionJson) {
  const Action a{0.5, 5, 0.01, 1};
  const nlohmann::json j = a;
  EXPECT_EQ(j.at("gamma").get<double>(), 5.0);
  EXPECT_EQ(j.get<Action>(), a);
}

TEST(Hyperspace, ActionValidation) {
  EXPECT_THROW(validate(Action{0, 0, 0.1, 3}), Error);
  EXPECT_THROW(validate(Action{-1, 0, 0.1, 0}), Error);
  EXPECT_NO_THROW(validate(Action{0, 0, 0.1, 1}));
}
