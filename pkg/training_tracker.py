import os
import json
import logging
from datetime import datetime

LOGGER = logging.getLogger(__name__)

STATUSES = ("pending", "training", "trained", "failed")


class TrainingTracker:
    def __init__(self, tracking_file, K, strategy):
        """
        Track the per-block status of one supernet training run

        Args:
            tracking_file: Path of the JSON progress file, usually next to the checkpoint.
            K: Number of supernet blocks.
            strategy: Training strategy name, recorded for the summary.
        """
        self.tracking_file = str(tracking_file)
        self.K = K
        self.strategy = strategy
        self.progress_data = self.load_progress()

    def load_progress(self):
        """Resume the progress file of the same K and strategy, or start every block as pending"""
        if os.path.exists(self.tracking_file):
            try:
                with open(self.tracking_file, 'r', encoding='utf-8') as f:
                    data = json.load(f)
                if data.get("K") == self.K and data.get("strategy") == self.strategy:
                    return data
                LOGGER.warning("progress file %s belongs to another run, starting fresh", self.tracking_file)
            except (json.JSONDecodeError, IOError) as e:
                LOGGER.warning("unreadable progress file %s: %s", self.tracking_file, e)

        return {
            "created_at": datetime.now().isoformat(),
            "last_updated": datetime.now().isoformat(),
            "strategy": self.strategy,
            "K": self.K,
            "trained_count": 0,
            "failed_count": 0,
            "blocks": {
                str(k): {
                    "status": "pending",  # pending, training, trained, failed
                    "iterations": 0,
                    "started_at": None,
                    "finished_at": None,
                    "error_message": None
                }
                for k in range(1, self.K + 1)
            }
        }

    def save_progress(self):
        """Write block statuses and counts back to the progress file"""
        self.progress_data["last_updated"] = datetime.now().isoformat()
        self.progress_data["trained_count"] = self.count("trained")
        self.progress_data["failed_count"] = self.count("failed")
        try:
            with open(self.tracking_file, 'w', encoding='utf-8') as f:
                json.dump(self.progress_data, f, indent=2, ensure_ascii=False)
        except IOError as e:
            LOGGER.error("Error saving progress: %s", e)

    def count(self, status):
        return sum(1 for b in self.progress_data["blocks"].values() if b["status"] == status)

    def status(self, k):
        return self.progress_data["blocks"][str(k)]["status"]

    def get_pending_blocks(self):
        """Blocks that still have to be trained, in training order"""
        return [int(k) for k, info in sorted(self.progress_data["blocks"].items(), key=lambda item: int(item[0]))
                if info["status"] in ("pending", "training")]

    def mark_as_training(self, k):
        block = self.progress_data["blocks"][str(k)]
        if block["status"] != "training":
            block["status"] = "training"
            block["started_at"] = datetime.now().isoformat()
            self.save_progress()

    def mark_as_trained(self, k, iterations):
        """Record that block k finished its iterations and is frozen"""
        block = self.progress_data["blocks"][str(k)]
        block["status"] = "trained"
        block["iterations"] = iterations
        block["finished_at"] = datetime.now().isoformat()
        block["error_message"] = None
        self.save_progress()

    def mark_as_failed(self, k, iterations, error_message):
        """Record the iteration at which block k was aborted, and why"""
        block = self.progress_data["blocks"][str(k)]
        block["status"] = "failed"
        block["iterations"] = iterations
        block["error_message"] = error_message
        self.save_progress()

    def print_summary(self):
        """Print the block counts of the run by status"""
        total = self.K
        trained = self.count("trained")
        failed = self.count("failed")
        pending = len(self.get_pending_blocks())

        print(f"\n=== Supernet Training Summary ({self.strategy}, K={self.K}) ===")
        print(f"Blocks: {total}")
        print(f"Trained: {trained}")
        print(f"Failed: {failed}")
        print(f"Pending: {pending}")
        print(f"Progress: {(trained / total * 100):.1f}%")
        print(f"Last updated: {self.progress_data['last_updated']}")

    def print_failed_list(self):
        """Print each aborted block with its iteration count and evaluator error"""
        failed = [(k, info) for k, info in self.progress_data["blocks"].items() if info["status"] == "failed"]

        if not failed:
            print("\n=== No Failed Blocks ===")
            return

        print(f"\n=== Failed Blocks ({len(failed)} total) ===")
        for k, info in failed:
            print(f"  block {k} after {info['iterations']} iterations")
            print(f"     Error: {info.get('error_message', 'Unknown error')}")
