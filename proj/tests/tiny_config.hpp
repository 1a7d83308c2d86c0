#pragma once

// A few-second experiment for tests that need a whole model.

#include "fsdet/config.hpp"

namespace fsdet::testing {

inline ExperimentConfig tiny_config() {
  ExperimentConfig cfg = desk_config();
  cfg.name = "tiny";
  cfg.model.backbone.channels = {4, 8, 8, 8};
  cfg.model.query = {48, 64};
  cfg.model.support = {32, 4};
  cfg.model.anchors.scales = {12, 20};
  cfg.model.rpn.pre_nms_k = 60;
  cfg.model.rpn.post_nms_k = 16;
  cfg.model.relation.patch_mid = 4;
  cfg.model.relation.patch_out = 8;
  cfg.training.schedule.total_iterations = 4;
  cfg.training.schedule.decay_step = 3;
  cfg.training.train_proposals = 16;
  cfg.synthetic.train_categories = {"square", "disc", "triangle"};
  cfg.synthetic.test_categories = {"frame", "star"};
  cfg.synthetic.train_images = 12;
  cfg.synthetic.test_images = 6;
  cfg.synthetic.image_size = 48;
  cfg.synthetic.min_object_size = 12;
  cfg.synthetic.max_object_size = 20;
  cfg.synthetic.max_objects = 2;
  cfg.synthetic.clutter = 1;
  cfg.eval.ways = 2;
  cfg.eval.shots = 1;
  cfg.eval.episodes = 2;
  cfg.eval.queries_per_category = 2;
  cfg.eval.detect.proposals = 16;
  cfg.model = cfg.model.resolved();
  return cfg;
}

}  // namespace fsdet::testing
