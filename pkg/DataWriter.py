import json
import os
import logging

import numpy as np

MANIFEST = "manifest.json"
FLOAT_FORMAT = "%.17g"


class DataWriter:
    """Writes datasets, reports and training logs under one output
    directory.

    Attributes
    ----------
    out_dir:    str
                Directory every file is written into; created if missing.
    """
    def __init__(self, out_dir):
        """Constructor for DataWriter

        Parameters
        ----------
        out_dir:    str
                    Output directory path.
        """
        logging.basicConfig(filename="PIGAN_logs.txt",
                            format='%(asctime)s %(levelname)s:%(message)s',
                            datefmt='%m/%d/%Y %I:%M:%S %p')

        self.out_dir = out_dir
        os.makedirs(out_dir, exist_ok=True)

    def path(self, filename):
        return os.path.join(self.out_dir, filename)

    def csv_header(self, n_emg, n_muscles):
        """Column names t, emg_0.., force_0.., theta of a cycle file.

        Parameters
        ----------
        n_emg:      int
        n_muscles:  int

        Returns
        -------
        header: str
        """
        columns = (["t"] + ["emg_%d" % b for b in range(n_emg)] +
                   ["force_%d" % n for n in range(n_muscles)] + ["theta"])
        return ",".join(columns)

    def write_cycle(self, sample, filename):
        """Writes one motion cycle as a CSV table, one row per frame.

        Parameters
        ----------
        sample:     MotionSample
        filename:   str
                    File name inside out_dir.

        Returns
        -------
        None
        """
        table = np.column_stack([sample.time(), sample.emg.T, sample.force.T,
                                 sample.theta])
        header = self.csv_header(sample.emg.shape[0], sample.force.shape[0])
        np.savetxt(self.path(filename), table, fmt=FLOAT_FORMAT,
                   delimiter=",", header=header, comments="")

    def write_dataset(self, dataset):
        """Writes every cycle of a dataset plus a manifest recording the
        simulator configuration, seed and split tags.

        Parameters
        ----------
        dataset:    Dataset

        Returns
        -------
        manifest:   dict
                    The manifest as written.
        """
        entries = []
        for index, (sample, tag) in enumerate(zip(dataset.samples,
                                                  dataset.splits)):
            filename = "cycle_%04d.csv" % index
            self.write_cycle(sample, filename)
            entries.append({"file": filename, "split": tag,
                            "family": sample.family, "dt": sample.dt,
                            "frames": sample.frames})
        manifest = {"config": dataset.config.to_dict(),
                    "seed": dataset.seed,
                    "family": dataset.family,
                    "n_cycles": len(dataset),
                    "content_hash": dataset.content_hash(),
                    "metadata": dataset.metadata,
                    "samples": entries}
        self.write_json(MANIFEST, manifest)
        logging.info("Dataset of %d cycles written to %s"
                     % (len(dataset), self.out_dir))
        return manifest

    def convert_np_arrays(self, value):
        """Recursively converts numpy arrays and scalars (and tuples) to
        plain, JSON-serializable python objects.

        Parameters
        ----------
        value:  object

        Returns
        -------
        serializable:   object
        """
        if isinstance(value, dict):
            return {str(k): self.convert_np_arrays(v)
                    for k, v in value.items()}
        if isinstance(value, (list, tuple)):
            return [self.convert_np_arrays(v) for v in value]
        if isinstance(value, np.ndarray):
            return value.tolist()
        if isinstance(value, np.generic):
            return value.item()
        return value

    def write_json(self, filename, document):
        """Writes a JSON document with sorted keys.

        Returns
        -------
        path:   str
        """
        path = self.path(filename)
        with open(path, 'w') as outfile:
            json.dump(self.convert_np_arrays(document), outfile,
                      indent=2, sort_keys=True)
        logging.info("File: " + path + " has been written successfully!")
        return path

    def append_jsonl(self, filename, record):
        """Appends one record as a line of a JSON-lines log.

        Returns
        -------
        path:   str
        """
        path = self.path(filename)
        with open(path, 'a') as outfile:
            outfile.write(json.dumps(self.convert_np_arrays(record),
                                     sort_keys=True) + "\n")
        return path
