// Small end-to-end run: generate a two-body scene, fit it on the first 75%
// of the frames, predict the rest and group particles by their motion.
//
//   demo_extrapolate [iterations]

#include <cstdlib>
#include <iostream>

#include "rigidflow/rigidflow.hpp"

using namespace rigidflow;

int main(int argc, char** argv) {
  const int iterations = argc > 1 ? std::atoi(argv[1]) : 1500;

  const SceneSpec scene = scene_screw(80);
  const TrajectoryDataset full = generate(scene.objects, kPresetFrames, kPresetHorizon, 0.0, 1);
  auto [train_set, future] = split(full, 0.75);
  future.bbox = full.bbox;

  TrainConfig cfg;
  cfg.iterations = iterations;
  TrainResult res = train(train_set, cfg);
  std::cout << "trained " << iterations << " iterations in " << res.report.wall_seconds << " s, final loss "
            << res.report.losses.back().total << "\n";

  const Checkpoint ck = make_checkpoint(std::move(res.model), cfg, train_set);
  const TrajectoryErrors err = compare_trajectories(predict_dataset(ck, future.timestamps), future);
  std::cout << "extrapolation RMSE " << err.overall << " (" << err.percent_of_diagonal << "% of bbox diagonal)\n";

  const auto ids = group_by_physics(ck.model, ck.canonical, 0.0, 2, 0);
  const SegmentationMetrics m = segmentation_metrics(ids, full.labels);
  std::cout << "grouping F1 " << m.f1 << ", mIoU " << m.miou << "\n";
}
