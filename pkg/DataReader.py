import json
import os.path
import logging

import numpy as np
from scipy import interpolate

from MotionSimulator import Dataset, MotionSample, SimConfig

MANIFEST = "manifest.json"


class DataReader:
    """DataReader loads a dataset directory written by the DataWriter.

    The manifest names every cycle file with its split tag and family; each
    cycle CSV holds the columns t, emg_0.., force_0.., theta. Columns with
    a few blank or non-numerical entries (less than 10%) are linearly
    interpolated; anything worse is rejected.

    Attributes
    ----------
    data_dir:   str
                Directory holding manifest.json and the cycle files.
    manifest:   dict
                The parsed manifest.
    dataset:    Dataset
                The cycles read in, in manifest order.
    """
    def __init__(self, data_dir):

        logging.basicConfig(filename="PIGAN_logs.txt",
                            format='%(asctime)s %(levelname)s:%(message)s',
                            datefmt='%m/%d/%Y %I:%M:%S %p')

        self.data_dir = data_dir
        try:
            self.validate_data_dir(data_dir)
            self.manifest = self.read_manifest()
            try:
                self.dataset = self.read_dataset()

            except TypeError:
                print("A cycle file has blank or non-numerical values. "
                      "Please remove these and try again.")
                logging.error("A cycle file in %s has blank or "
                              "non-numerical values." % data_dir)
                raise

            except ValueError as err:
                print("The dataset in %s is not consistent: %s"
                      % (data_dir, err))
                logging.error("Inconsistent dataset in %s: %s"
                              % (data_dir, err))
                raise

        except FileNotFoundError as err:
            print("The dataset cannot be found: %s" % err)
            logging.error("Dataset file not found: %s" % err)
            raise

    def validate_data_dir(self, data_dir):
        """Checks that the directory and its manifest exist.

        Returns
        -------
        None
        """
        if not os.path.isdir(data_dir):
            raise FileNotFoundError(data_dir)
        if not os.path.isfile(os.path.join(data_dir, MANIFEST)):
            raise FileNotFoundError(os.path.join(data_dir, MANIFEST))

    def read_manifest(self):
        with open(os.path.join(self.data_dir, MANIFEST)) as infile:
            return json.load(infile)

    def validate_csv_file(self, csv_file_path):
        """Checks that a cycle file exists and has a csv file extension.

        Parameters
        ----------
        csv_file_path:  str

        Returns
        -------
        None
        """
        if not os.path.isfile(csv_file_path):
            raise FileNotFoundError(csv_file_path)

        if not csv_file_path.lower().endswith(".csv"):
            raise ValueError("%s does not have a .csv extension"
                             % csv_file_path)

    def read_header(self, csv_file_path):
        with open(csv_file_path) as infile:
            return infile.readline().strip().split(",")

    def read_csv_file(self, csv_file_path, frames):
        """Reads one cycle file into its emg, force and theta arrays.

        Parameters
        ----------
        csv_file_path:  str
        frames:         int
                        Frame count the manifest promises.

        Returns
        -------
        emg:    numpy array (B, L)
        force:  numpy array (N, L)
        theta:  numpy array (L,)
        """
        self.validate_csv_file(csv_file_path)
        header = self.read_header(csv_file_path)
        n_emg = sum(1 for name in header if name.startswith("emg_"))
        n_muscles = sum(1 for name in header if name.startswith("force_"))
        if header[0] != "t" or header[-1] != "theta" or \
                len(header) != n_emg + n_muscles + 2:
            raise ValueError("unexpected columns in %s" % csv_file_path)

        table = np.atleast_2d(np.genfromtxt(csv_file_path, delimiter=',',
                                            skip_header=1))
        if table.shape[1] != len(header):
            raise ValueError("%s has rows of %d values, header names %d"
                             % (csv_file_path, table.shape[1], len(header)))
        columns = []
        for index in range(table.shape[1]):
            column = table[:, index]
            if np.isnan(column).any() and self.can_interp(column):
                print("warning: interpolating missing values in %s"
                      % csv_file_path)
                logging.warning("Interpolating missing %s values in %s"
                                % (header[index], csv_file_path))
                column = self.interp_missing(column)
            columns.append(column)
        table = np.column_stack(columns)
        self.validate_csv_data(table, frames)

        emg = table[:, 1:1 + n_emg].T.copy()
        force = table[:, 1 + n_emg:1 + n_emg + n_muscles].T.copy()
        return emg, force, table[:, -1].copy()

    def validate_csv_data(self, table, frames):
        """Raises TypeError if NaNs remain after interpolation and
        ValueError if the frame count differs from the manifest.

        Returns
        -------
        None
        """
        if np.isnan(table).any():
            raise TypeError("cycle file has values that cannot be "
                            "interpolated")

        if table.shape[0] != frames:
            raise ValueError("expected %d frames, found %d"
                             % (frames, table.shape[0]))

    def can_interp(self, column):
        """A column can be interpolated if at least 90% of its values are
        defined.

        Parameters
        ----------
        column: numpy array

        Returns
        -------
        can_interp: boolean
        """
        frac_def_vals = np.sum(np.isfinite(column)) / column.size
        return bool(frac_def_vals >= 0.9)

    def interp_missing(self, column):
        """Linearly interpolates missing values of a column over the frame
        index; values beyond the last defined frame are held.

        Parameters
        ----------
        column: numpy array

        Returns
        -------
        interp_column:  numpy array
        """
        defined = np.isfinite(column)
        indices = np.arange(column.size)
        interp_funct = interpolate.interp1d(
            indices[defined], column[defined], bounds_error=False,
            fill_value=(column[defined][0], column[defined][-1]))
        return interp_funct(indices)

    def read_dataset(self):
        """Builds the Dataset described by the manifest.

        Returns
        -------
        dataset:    Dataset
        """
        manifest = self.manifest
        cfg = SimConfig.from_dict(manifest["config"])
        samples, splits = [], []
        for entry in manifest["samples"]:
            path = os.path.join(self.data_dir, entry["file"])
            emg, force, theta = self.read_csv_file(path, entry["frames"])
            sample = MotionSample(dt=float(entry["dt"]), emg=emg,
                                  force=force, theta=theta,
                                  family=entry.get("family"))
            sample.validate()
            samples.append(sample)
            splits.append(entry["split"])
        if len(samples) != manifest.get("n_cycles", len(samples)):
            raise ValueError("manifest lists %d cycles but promises %d"
                             % (len(samples), manifest["n_cycles"]))
        dataset = Dataset(samples, cfg, splits, manifest.get("family"),
                          manifest.get("seed", 0),
                          manifest.get("metadata", {}))
        logging.info("Read %d cycles from %s" % (len(dataset),
                                                  self.data_dir))
        return dataset
