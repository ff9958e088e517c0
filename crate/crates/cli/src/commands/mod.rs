mod ablate;
mod align;
mod compress;
mod pretrain;
mod tools;

use crate::error::CliResult;
use crate::{Command, Ctx};

pub fn dispatch(ctx: &Ctx) -> CliResult<()> {
    match ctx.command {
        Command::Pretrain => pretrain::run(ctx),
        Command::Sft => align::sft(ctx),
        Command::TrainReward => align::train_reward(ctx),
        Command::Rlhf => align::rlhf(ctx),
        Command::Distill => compress::distill(ctx),
        Command::Prune => compress::prune_cmd(ctx),
        Command::Quantize => compress::quantize(ctx),
        Command::Recover => compress::recover(ctx),
        Command::CommitteeRs => align::committee_rs(ctx),
        Command::Sample => tools::sample(ctx),
        Command::Eval => tools::eval(ctx),
        Command::Decontaminate => tools::decontaminate(ctx),
        Command::AblateRecipe => ablate::recipe(ctx),
        Command::AblatePruneDistill => ablate::prune_distill(ctx),
        Command::AblateRecovery => ablate::recovery(ctx),
    }
}
