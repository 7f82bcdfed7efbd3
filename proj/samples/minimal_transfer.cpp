// Pretrains a tiny source generator, transfers it with FixNoise and writes an
// alpha-interpolation grid to minimal_transfer_grid.png. Runs in seconds.
#include <iostream>

#include "fixnoise/domains.hpp"
#include "fixnoise/grid.hpp"

using namespace fixnoise;

int main() {
    GeneratorConfig g;
    g.final_resolution = 8;
    g.z_dim = g.w_dim = 16;
    g.channels = {{4, 16}, {8, 8}};
    g.noise_strength_init = 0.1;

    const Tensor source_images = images_to_batch(render_domain(domain_preset("similar-source", 8), 1, 200).images);
    const Tensor target_images = images_to_batch(render_domain(domain_preset("similar-target", 8), 1, 100).images);

    TrainConfig t;
    t.batch_size = 8;
    t.total_images = 2000;
    t.ema_halflife_images = 500;
    t.log_interval = 50;
    const Checkpoint source = pretrain_source(g, t, source_images);

    t.total_images = 1000;
    t.mode = parse_mode("fixnoise");
    t.loss.lambda_fm = 0.05;
    const Checkpoint target = transfer(t, source, target_images);

    const GeneratorModel gs = generator_from_checkpoint(source), gt = generator_from_checkpoint(target);
    const GridResult grid = interpolation_grid(gt, {1.0, 0.75, 0.5, 0.25, 0.0}, 4, 0, &gs);
    write_png("minimal_transfer_grid.png", tile_images(grid.cells, grid.rows, grid.cols));
    for (const auto& label : grid.column_labels) std::cout << label << " ";
    std::cout << "\nwrote minimal_transfer_grid.png\n";
}
